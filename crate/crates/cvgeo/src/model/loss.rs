//! Detection objective: objectness BCE over every grid cell plus a squared
//! regression penalty at the cell containing the ground-truth center.

use ndarray::{Array4, ArrayD};

use crate::error::{Error, Result};
use crate::model::bbox::BBox;
use crate::model::head::encode_box;
use crate::nn::Session;
use crate::tape::Var;

/// Weight of the box-regression term relative to the objectness term.
pub const LAMBDA_BOX: f64 = 5.0;

/// Builds the scalar training loss from raw head logits `(B, 5, Sh, Sw)`.
///
/// The BCE is averaged over all cells (so its scale is independent of the
/// grid size); the box term sums the four squared component errors at the
/// positive cell and averages over the batch.
pub fn detection_loss(
    sess: &mut Session,
    raw: Var,
    gts: &[BBox],
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
) -> Result<Var> {
    let shape = sess.tape.shape(raw).to_vec();
    if shape.len() != 4 || shape[1] != 5 {
        return Err(Error::Shape(format!(
            "detection loss expects (B, 5, Sh, Sw) logits, got {shape:?}"
        )));
    }
    let (b, sh, sw) = (shape[0], shape[2], shape[3]);
    if gts.len() != b {
        return Err(Error::Shape(format!(
            "{} ground-truth boxes for batch of {b}",
            gts.len()
        )));
    }

    let mut obj_targets = Array4::<f64>::zeros((b, 1, sh, sw));
    let mut xy_targets = Array4::<f64>::zeros((b, 2, sh, sw));
    let mut xy_mask = Array4::<f64>::zeros((b, 2, sh, sw));
    let mut wh_targets = Array4::<f64>::zeros((b, 2, sh, sw));
    let mut wh_mask = Array4::<f64>::zeros((b, 2, sh, sw));
    for (bi, gt) in gts.iter().enumerate() {
        let t = encode_box(gt, stride, anchor_w, anchor_h, sh, sw)?;
        obj_targets[[bi, 0, t.row, t.col]] = 1.0;
        xy_targets[[bi, 0, t.row, t.col]] = t.tx;
        xy_targets[[bi, 1, t.row, t.col]] = t.ty;
        xy_mask[[bi, 0, t.row, t.col]] = 1.0;
        xy_mask[[bi, 1, t.row, t.col]] = 1.0;
        wh_targets[[bi, 0, t.row, t.col]] = t.tw;
        wh_targets[[bi, 1, t.row, t.col]] = t.th;
        wh_mask[[bi, 0, t.row, t.col]] = 1.0;
        wh_mask[[bi, 1, t.row, t.col]] = 1.0;
    }

    let obj_logits = sess.tape.slice_channels(raw, 4, 5)?;
    let bce = sess
        .tape
        .bce_with_logits_mean(obj_logits, &obj_targets.into_dyn())?;

    let xy_logits = sess.tape.slice_channels(raw, 0, 2)?;
    let xy = sess.tape.sigmoid(xy_logits);
    let sq_xy = sess
        .tape
        .masked_sq_err_sum(xy, &xy_targets.into_dyn(), &xy_mask.into_dyn())?;

    let wh = sess.tape.slice_channels(raw, 2, 4)?;
    let sq_wh = sess
        .tape
        .masked_sq_err_sum(wh, &wh_targets.into_dyn(), &wh_mask.into_dyn())?;

    let box_sum = sess.tape.add(sq_xy, sq_wh)?;
    let box_term = sess.tape.scale(box_sum, LAMBDA_BOX / b as f64);
    sess.tape.add(bce, box_term)
}

/// Convenience wrapper: evaluates the loss for raw logits outside a session.
pub fn detection_loss_value(
    raw: &ArrayD<f64>,
    gts: &[BBox],
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
) -> Result<f64> {
    let params = crate::nn::ParamSet::new();
    let mut sess = Session::new(&params, false);
    let rv = sess.input(raw.clone());
    let loss = detection_loss(&mut sess, rv, gts, stride, anchor_w, anchor_h)?;
    Ok(sess.tape.value(loss)[[0]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::head::encode_box;
    use ndarray::IxDyn;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn perfect_prediction_drives_the_loss_toward_zero() {
        let (stride, aw, ah) = (16, 10.0, 10.0);
        let gt = BBox::new(40.0, 50.0, 12.0, 20.0);
        let t = encode_box(&gt, stride, aw, ah, 4, 4).unwrap();
        let mut raw = ArrayD::zeros(IxDyn(&[1, 5, 4, 4]));
        // saturate objectness toward the targets and hit the offsets exactly
        raw.fill(-40.0);
        raw[[0, 4, t.row, t.col]] = 40.0;
        for i in 0..4 {
            for j in 0..4 {
                raw[[0, 0, i, j]] = logit(t.tx.max(1e-9));
                raw[[0, 1, i, j]] = logit(t.ty.max(1e-9));
                raw[[0, 2, i, j]] = t.tw;
                raw[[0, 3, i, j]] = t.th;
            }
        }
        let loss = detection_loss_value(&raw, &[gt], stride, aw, ah).unwrap();
        assert!(loss < 1e-6, "near-perfect prediction should score ~0, got {loss}");
    }

    #[test]
    fn zero_head_loss_matches_direct_evaluation() {
        let (stride, aw, ah) = (16, 10.0, 14.0);
        let gt = BBox::new(33.0, 50.0, 8.0, 21.0);
        let raw = ArrayD::zeros(IxDyn(&[1, 5, 4, 4]));
        let loss = detection_loss_value(&raw, &[gt], stride, aw, ah).unwrap();

        // all-zero logits leave every BCE cell at ln 2; the box penalty is
        // evaluated by plain scalar arithmetic
        let t = encode_box(&gt, stride, aw, ah, 4, 4).unwrap();
        let box_term = (0.5 - t.tx).powi(2)
            + (0.5 - t.ty).powi(2)
            + t.tw.powi(2)
            + t.th.powi(2);
        let expected = std::f64::consts::LN_2 + LAMBDA_BOX * box_term;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn batch_mismatch_and_bad_center_are_rejected() {
        let raw = ArrayD::zeros(IxDyn(&[2, 5, 4, 4]));
        let gt = BBox::new(10.0, 10.0, 4.0, 4.0);
        assert!(detection_loss_value(&raw, &[gt], 16, 8.0, 8.0).is_err());

        let outside = BBox::new(1000.0, 10.0, 4.0, 4.0);
        assert!(matches!(
            detection_loss_value(&raw, &[gt, outside], 16, 8.0, 8.0),
            Err(Error::Precondition(_))
        ));
    }
}
