//! Line-oriented dataset manifests.
//!
//! A manifest is a JSONL file: the first line is a header record carrying
//! the split name and the expected image dimensions, every following line
//! is one sample:
//!
//! ```text
//! {"split":"train","query_size":[256,512],"reference_size":[1024,1024]}
//! {"query":"q0.png","reference":"r0.png","view":"ground","click":[128,300],"bbox":[512.0,480.0,96.0,64.0]}
//! ```
//!
//! `click` is `[row, col]` in query pixels; `bbox` is `[cx, cy, w, h]` in
//! reference pixels. Image paths are stored relative to the manifest file.
//!
//! Adapting a real annotation corpus is a matter of emitting these records
//! (one per query/reference pair) next to its images; nothing else in the
//! pipeline changes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::bbox::BBox;
use crate::vspe::{ClickPoint, View};

/// Dataset split a manifest belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One annotated query/reference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub query: PathBuf,
    pub reference: PathBuf,
    pub view: View,
    pub click: ClickPoint,
    pub gt_box: BBox,
}

#[derive(Serialize, Deserialize)]
struct HeaderRecord {
    split: Split,
    query_size: [usize; 2],
    reference_size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    query: String,
    reference: String,
    view: View,
    click: [usize; 2],
    bbox: [f64; 4],
}

/// A split's worth of samples plus its expected image dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    /// Expected query dimensions `(height, width)`.
    pub query_size: (usize, usize),
    /// Expected reference dimensions `(height, width)`.
    pub reference_size: (usize, usize),
    pub samples: Vec<Sample>,
    /// Directory sample paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Resolves a sample path against the manifest root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean ground-truth box extents `(w, h)`, the anchor source.
    pub fn mean_box_size(&self) -> Option<(f64, f64)> {
        if self.samples.is_empty() {
            return None;
        }
        let n = self.samples.len() as f64;
        let (sw, sh) = self
            .samples
            .iter()
            .fold((0.0, 0.0), |(aw, ah), s| (aw + s.gt_box.w, ah + s.gt_box.h));
        Some((sw / n, sh / n))
    }

    /// Checks record invariants: clicks and boxes in bounds, no duplicate
    /// (query, reference) pairs.
    pub fn validate_records(&self) -> Result<()> {
        let (qh, qw) = self.query_size;
        let (rh, rw) = self.reference_size;
        let mut seen = std::collections::HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.click.row >= qh || s.click.col >= qw {
                return Err(Error::Validation(format!(
                    "sample {i}: click ({}, {}) outside {qh}x{qw} query",
                    s.click.row, s.click.col
                )));
            }
            s.gt_box
                .validate_within(rw, rh)
                .map_err(|e| Error::Validation(format!("sample {i}: {e}")))?;
            if !seen.insert((s.query.clone(), s.reference.clone())) {
                return Err(Error::Validation(format!(
                    "sample {i}: duplicate pair {:?} / {:?}",
                    s.query, s.reference
                )));
            }
        }
        Ok(())
    }

    /// Checks that every referenced image exists.
    pub fn validate_paths(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            for p in [&s.query, &s.reference] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!(
                        "sample {i}: missing image {full:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::Validation(format!("cannot open manifest {path:?}: {e}")))?;
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "empty manifest".into(),
            })?;
        let first = first?;
        let header: HeaderRecord = serde_json::from_str(&first).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header record: {e}"),
        })?;

        let mut samples = Vec::new();
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            samples.push(Sample {
                query: PathBuf::from(record.query),
                reference: PathBuf::from(record.reference),
                view: record.view,
                click: ClickPoint::new(record.click[0], record.click[1]),
                gt_box: BBox::new(record.bbox[0], record.bbox[1], record.bbox[2], record.bbox[3]),
            });
        }
        let manifest = Self {
            split: header.split,
            query_size: (header.query_size[0], header.query_size[1]),
            reference_size: (header.reference_size[0], header.reference_size[1]),
            samples,
            root,
        };
        manifest.validate_records()?;
        manifest.validate_paths()?;
        Ok(manifest)
    }

    /// Writes the manifest (header + one record per line).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = fs::File::create(path)?;
        let header = HeaderRecord {
            split: self.split,
            query_size: [self.query_size.0, self.query_size.1],
            reference_size: [self.reference_size.0, self.reference_size.1],
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for s in &self.samples {
            let record = SampleRecord {
                query: s.query.to_string_lossy().into_owned(),
                reference: s.reference.to_string_lossy().into_owned(),
                view: s.view,
                click: [s.click.row, s.click.col],
                bbox: [s.gt_box.cx, s.gt_box.cy, s.gt_box.w, s.gt_box.h],
            };
            writeln!(out, "{}", serde_json::to_string(&record)?)?;
        }
        Ok(())
    }
}

/// Shuffles and partitions a manifest into train/validation/test.
///
/// Fractions must be non-negative and sum to 1; splits are disjoint and
/// exhaustive, with rounding remainders going to the test split.
pub fn split_manifest(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (ft, fv, fe) = fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {fractions:?}"
        )));
    }
    let mut indices: Vec<usize> = (0..manifest.samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let n = indices.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = ((fv * n as f64).round() as usize).min(n - n_train.min(n));
    let make = |split: Split, idxs: &[usize]| DatasetManifest {
        split,
        query_size: manifest.query_size,
        reference_size: manifest.reference_size,
        samples: idxs.iter().map(|&i| manifest.samples[i].clone()).collect(),
        root: manifest.root.clone(),
    };
    let train = make(Split::Train, &indices[..n_train.min(n)]);
    let val = make(Split::Validation, &indices[n_train.min(n)..(n_train + n_val).min(n)]);
    let test = make(Split::Test, &indices[(n_train + n_val).min(n)..]);
    Ok((train, val, test))
}
