//! Dataset handling: manifests, synthetic scenes and the tensor pipeline
//! feeding the model.

pub mod images;
pub mod manifest;
pub mod synth;

pub use manifest::{split_manifest, DatasetManifest, Sample, Split};
pub use synth::{synth_generate, SynthConfig};

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::bbox::BBox;
use crate::model::train::Batch;
use crate::run::RunConfig;
use crate::vspe::{attach_encoding, drone_encoding, ground_encoding, View};

/// Loads, resizes and encodes one query image: `(C+1, H, W)`.
pub fn load_query_tensor(
    manifest: &DatasetManifest,
    sample: &Sample,
    run: &RunConfig,
) -> Result<Array3<f64>> {
    let image = images::load_rgb_tensor(&manifest.resolve(&sample.query))?;
    let (_, h, w) = image.dim();
    let image = images::resize_rgb(&image, run.query_size);
    let click = sample.click.rescaled((h, w), run.query_size);
    let map = match sample.view {
        View::Ground => ground_encoding(run.query_size.0, run.query_size.1, click, &run.ground)?,
        View::Drone => drone_encoding(run.query_size.0, run.query_size.1, click, &run.drone)?,
    };
    attach_encoding(&image, &map)
}

/// Loads and resizes one reference image: `(3, H, W)`.
pub fn load_reference_tensor(
    manifest: &DatasetManifest,
    sample: &Sample,
    run: &RunConfig,
) -> Result<Array3<f64>> {
    let image = images::load_rgb_tensor(&manifest.resolve(&sample.reference))?;
    Ok(images::resize_rgb(&image, run.reference_size))
}

/// Ground-truth box rescaled into model reference coordinates.
pub fn scaled_gt_box(manifest: &DatasetManifest, sample: &Sample, run: &RunConfig) -> BBox {
    let (rh, rw) = manifest.reference_size;
    sample.gt_box.scaled(
        run.reference_size.1 as f64 / rw as f64,
        run.reference_size.0 as f64 / rh as f64,
    )
}

/// Scale factors taking model reference coordinates back to manifest
/// reference pixels, `(sx, sy)`.
pub fn reference_upscale(manifest: &DatasetManifest, run: &RunConfig) -> (f64, f64) {
    (
        manifest.reference_size.1 as f64 / run.reference_size.1 as f64,
        manifest.reference_size.0 as f64 / run.reference_size.0 as f64,
    )
}

/// All samples of a manifest loaded into memory as model-ready tensors.
pub struct PreparedDataset {
    pub queries: Vec<Array3<f64>>,
    pub references: Vec<Array3<f64>>,
    pub gt_boxes: Vec<BBox>,
    /// Mean ground-truth extents in model coordinates, the decode anchor.
    pub anchor: (f64, f64),
}

impl PreparedDataset {
    /// Loads every sample (in parallel) and computes the anchor.
    pub fn load(manifest: &DatasetManifest, run: &RunConfig) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Validation("manifest has no samples".into()));
        }
        let items: Vec<(Array3<f64>, Array3<f64>, BBox)> = manifest
            .samples
            .par_iter()
            .map(|s| -> Result<_> {
                Ok((
                    load_query_tensor(manifest, s, run)?,
                    load_reference_tensor(manifest, s, run)?,
                    scaled_gt_box(manifest, s, run),
                ))
            })
            .collect::<Result<_>>()?;
        let n = items.len() as f64;
        let (sw, sh) = items
            .iter()
            .fold((0.0, 0.0), |(aw, ah), (_, _, b)| (aw + b.w, ah + b.h));
        let (mut queries, mut references, mut gt_boxes) = (Vec::new(), Vec::new(), Vec::new());
        for (q, r, b) in items {
            queries.push(q);
            references.push(r);
            gt_boxes.push(b);
        }
        Ok(Self {
            queries,
            references,
            gt_boxes,
            anchor: (sw / n, sh / n),
        })
    }

    pub fn len(&self) -> usize {
        self.gt_boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_boxes.is_empty()
    }

    /// Stacks the given sample indices into a training batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let stack = |items: &[Array3<f64>]| -> ArrayD<f64> {
            let views: Vec<_> = indices.iter().map(|&i| items[i].view()).collect();
            ndarray::stack(Axis(0), &views)
                .expect("uniform sample shapes")
                .into_dyn()
        };
        Batch {
            queries: stack(&self.queries),
            references: stack(&self.references),
            gt_boxes: indices.iter().map(|&i| self.gt_boxes[i]).collect(),
        }
    }

    /// One query stacked as a `(1, C, H, W)` tensor, for single-sample runs.
    pub fn query_batch(&self, index: usize) -> ArrayD<f64> {
        let (c, h, w) = self.queries[index].dim();
        self.queries[index]
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .expect("contiguous")
    }
}
