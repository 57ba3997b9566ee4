//! IoU, acc@tau and the top-5 patch-retrieval protocol.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_query_tensor, load_reference_tensor, reference_upscale, DatasetManifest, Sample};
use crate::error::{Error, Result};
use crate::model::bbox::BBox;
use crate::model::GeoLocalizer;
use crate::run::RunConfig;

/// Aggregate localization metrics over one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at_25: f64,
    pub acc_at_50: f64,
    pub mean_iou: f64,
    pub n_samples: usize,
}

/// Intersection over union of two boxes; degenerate inputs score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.is_degenerate() || b.is_degenerate() {
        return 0.0;
    }
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Fraction of prediction/ground-truth pairs with IoU at or above `tau`.
pub fn accuracy_at(preds: &[BBox], gts: &[BBox], tau: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation("no prediction pairs to score".into()));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| iou(p, g) >= tau)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Retrieval-baseline scoring: the five highest-scoring patches (ties broken
/// in row-major order) are treated as predicted boxes; a hit is any of them
/// reaching `iou >= tau` against the ground truth.
pub fn patch_retrieval_hit(
    similarities: &Array2<f64>,
    gt: &BBox,
    patch_size: usize,
    tau: f64,
) -> Result<bool> {
    let (rows, cols) = similarities.dim();
    if rows * cols < 5 {
        return Err(Error::Precondition(format!(
            "retrieval grid {rows}x{cols} has fewer than 5 patches"
        )));
    }
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let mut order: Vec<(usize, usize)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(ai, aj), &(bi, bj)| {
        similarities[[bi, bj]]
            .partial_cmp(&similarities[[ai, aj]])
            .expect("scores must be comparable")
            .then((ai * cols + aj).cmp(&(bi * cols + bj)))
    });
    Ok(order.iter().take(5).any(|&(i, j)| {
        let patch = BBox::from_corners(
            (j * patch_size) as f64,
            (i * patch_size) as f64,
            ((j + 1) * patch_size) as f64,
            ((i + 1) * patch_size) as f64,
        );
        iou(&patch, gt) >= tau
    }))
}

/// Anything that can produce a predicted box for a sample, in the
/// manifest's reference pixel coordinates.
pub trait BoxPredictor: Sync {
    fn predict_box(&self, manifest: &DatasetManifest, sample: &Sample) -> Result<BBox>;
}

/// Runs the trained model on each sample.
pub struct ModelPredictor<'a> {
    pub model: &'a GeoLocalizer,
    pub run: &'a RunConfig,
}

impl BoxPredictor for ModelPredictor<'_> {
    fn predict_box(&self, manifest: &DatasetManifest, sample: &Sample) -> Result<BBox> {
        let query = load_query_tensor(manifest, sample, self.run)?;
        let reference = load_reference_tensor(manifest, sample, self.run)?;
        let (bbox, _) = self.model.predict(&query, &reference)?;
        let (sx, sy) = reference_upscale(manifest, self.run);
        Ok(bbox.scaled(sx, sy))
    }
}

/// Returns the annotated box itself; a plumbing check for the eval path.
pub struct OraclePredictor;

impl BoxPredictor for OraclePredictor {
    fn predict_box(&self, _manifest: &DatasetManifest, sample: &Sample) -> Result<BBox> {
        Ok(sample.gt_box)
    }
}

/// Scores a predictor over a whole manifest. Samples run in parallel; the
/// reduction is an ordered fold so reports are reproducible.
pub fn evaluate<P: BoxPredictor>(predictor: &P, manifest: &DatasetManifest) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty manifest".into()));
    }
    let ious: Vec<f64> = manifest
        .samples
        .par_iter()
        .map(|s| -> Result<f64> {
            let pred = predictor.predict_box(manifest, s)?;
            Ok(iou(&pred, &s.gt_box))
        })
        .collect::<Result<_>>()?;
    Ok(report_from_ious(&ious))
}

/// Aggregates per-sample IoUs into a report.
pub fn report_from_ious(ious: &[f64]) -> EvalReport {
    let n = ious.len();
    let hits =
        |tau: f64| ious.iter().filter(|&&v| v >= tau).count() as f64 / n as f64;
    EvalReport {
        acc_at_25: hits(0.25),
        acc_at_50: hits(0.5),
        mean_iou: ious.iter().sum::<f64>() / n as f64,
        n_samples: n,
    }
}
