//! Single-anchor grid detection head: decoding raw activations into boxes
//! and encoding ground-truth boxes into per-cell regression targets.

use ndarray::{Array4, ArrayD, Ix4};

use crate::error::{Error, Result};
use crate::model::bbox::BBox;

/// Per-cell activations of the detection head, shaped `(B, Sh, Sw, 5)` with
/// components `(tx, ty, tw, th, obj)`. `tx`, `ty` and `obj` are sigmoid
/// outputs in `(0, 1)`; `tw`, `th` are raw log-scale offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub values: Array4<f64>,
}

impl DetectionGrid {
    /// Applies activations to raw head logits `(B, 5, Sh, Sw)` and
    /// rearranges to `(B, Sh, Sw, 5)`.
    pub fn from_raw(raw: &ArrayD<f64>) -> Result<Self> {
        let raw = raw
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::Shape(format!("head output must be rank 4, got {:?}", raw.shape())))?;
        let (b, c, sh, sw) = raw.dim();
        if c != 5 {
            return Err(Error::Shape(format!("head output needs 5 channels, got {c}")));
        }
        let mut values = Array4::<f64>::zeros((b, sh, sw, 5));
        for bi in 0..b {
            for i in 0..sh {
                for j in 0..sw {
                    for k in 0..5 {
                        let v = raw[[bi, k, i, j]];
                        values[[bi, i, j, k]] = match k {
                            0 | 1 | 4 => 1.0 / (1.0 + (-v).exp()),
                            _ => v,
                        };
                    }
                }
            }
        }
        Ok(Self { values })
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn grid_h(&self) -> usize {
        self.values.dim().1
    }

    pub fn grid_w(&self) -> usize {
        self.values.dim().2
    }
}

/// Ground-truth box expressed in head-activation space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodedTarget {
    /// Grid cell containing the box center.
    pub row: usize,
    pub col: usize,
    /// Center offsets within the cell, in `[0, 1)`.
    pub tx: f64,
    pub ty: f64,
    /// Log-scale extents relative to the anchor.
    pub tw: f64,
    pub th: f64,
}

/// Encodes a ground-truth box into the activation-space target of its cell.
pub fn encode_box(
    gt: &BBox,
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
    grid_h: usize,
    grid_w: usize,
) -> Result<EncodedTarget> {
    if gt.is_degenerate() {
        return Err(Error::Precondition(format!(
            "cannot encode degenerate box w={} h={}",
            gt.w, gt.h
        )));
    }
    if !(anchor_w > 0.0 && anchor_h > 0.0) {
        return Err(Error::Config("anchors must be positive".into()));
    }
    let fx = gt.cx / stride as f64;
    let fy = gt.cy / stride as f64;
    if fx < 0.0 || fy < 0.0 || fx >= grid_w as f64 || fy >= grid_h as f64 {
        return Err(Error::Precondition(format!(
            "box center ({}, {}) outside the {}x{} grid at stride {stride}",
            gt.cx, gt.cy, grid_h, grid_w
        )));
    }
    let col = fx.floor() as usize;
    let row = fy.floor() as usize;
    Ok(EncodedTarget {
        row,
        col,
        tx: fx - col as f64,
        ty: fy - row as f64,
        tw: (gt.w / anchor_w).ln(),
        th: (gt.h / anchor_h).ln(),
    })
}

/// Decodes one cell's activations into a box.
pub fn decode_cell(
    tx: f64,
    ty: f64,
    tw: f64,
    th: f64,
    row: usize,
    col: usize,
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
) -> BBox {
    BBox {
        cx: (col as f64 + tx) * stride as f64,
        cy: (row as f64 + ty) * stride as f64,
        w: anchor_w * tw.exp(),
        h: anchor_h * th.exp(),
    }
}

/// Decodes every cell, batch by batch, as `(box, confidence)` pairs in
/// row-major cell order.
pub fn decode_boxes(
    grid: &DetectionGrid,
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
) -> Vec<Vec<(BBox, f64)>> {
    (0..grid.batch())
        .map(|b| {
            let mut cells = Vec::with_capacity(grid.grid_h() * grid.grid_w());
            for i in 0..grid.grid_h() {
                for j in 0..grid.grid_w() {
                    let v = &grid.values;
                    let bbox = decode_cell(
                        v[[b, i, j, 0]],
                        v[[b, i, j, 1]],
                        v[[b, i, j, 2]],
                        v[[b, i, j, 3]],
                        i,
                        j,
                        stride,
                        anchor_w,
                        anchor_h,
                    );
                    cells.push((bbox, v[[b, i, j, 4]]));
                }
            }
            cells
        })
        .collect()
}

/// The prediction for one batch item: the box at the highest-objectness
/// cell (first cell in row-major order on ties).
pub fn best_box(
    grid: &DetectionGrid,
    batch_index: usize,
    stride: usize,
    anchor_w: f64,
    anchor_h: f64,
) -> (BBox, f64) {
    let mut best = (0usize, 0usize);
    let mut best_obj = f64::NEG_INFINITY;
    for i in 0..grid.grid_h() {
        for j in 0..grid.grid_w() {
            let obj = grid.values[[batch_index, i, j, 4]];
            if obj > best_obj {
                best_obj = obj;
                best = (i, j);
            }
        }
    }
    let (i, j) = best;
    let v = &grid.values;
    (
        decode_cell(
            v[[batch_index, i, j, 0]],
            v[[batch_index, i, j, 1]],
            v[[batch_index, i, j, 2]],
            v[[batch_index, i, j, 3]],
            i,
            j,
            stride,
            anchor_w,
            anchor_h,
        ),
        best_obj,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cell_center_decodes_to_cell_midpoint() {
        let b = decode_cell(0.5, 0.5, 0.0, 0.0, 0, 0, 32, 10.0, 12.0);
        assert_eq!(b.cx, 16.0);
        assert_eq!(b.cy, 16.0);
        assert_eq!(b.w, 10.0, "zero log offsets recover the anchors");
        assert_eq!(b.h, 12.0);
    }

    #[test]
    fn encode_then_decode_recovers_the_box() {
        let anchor = (13.0, 9.0);
        let gt = BBox::new(37.5, 91.25, 22.0, 17.5);
        let t = encode_box(&gt, 16, anchor.0, anchor.1, 8, 8).unwrap();
        assert_eq!((t.row, t.col), (5, 2));
        let back = decode_cell(t.tx, t.ty, t.tw, t.th, t.row, t.col, 16, anchor.0, anchor.1);
        assert!((back.cx - gt.cx).abs() < 1e-9);
        assert!((back.cy - gt.cy).abs() < 1e-9);
        assert!((back.w - gt.w).abs() < 1e-9);
        assert!((back.h - gt.h).abs() < 1e-9);
    }

    #[test]
    fn round_trip_over_random_boxes_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (grid_h, grid_w, stride) = (8, 8, 16);
        let (aw, ah) = (20.0, 24.0);
        for _ in 0..1000 {
            let gt = BBox::new(
                rng.gen_range(0.0..(grid_w * stride) as f64),
                rng.gen_range(0.0..(grid_h * stride) as f64),
                rng.gen_range(0.5..80.0),
                rng.gen_range(0.5..80.0),
            );
            let t = encode_box(&gt, stride, aw, ah, grid_h, grid_w).unwrap();
            assert!((0.0..1.0).contains(&t.tx));
            assert!((0.0..1.0).contains(&t.ty));
            let back = decode_cell(t.tx, t.ty, t.tw, t.th, t.row, t.col, stride, aw, ah);
            for (a, b) in [
                (back.cx, gt.cx),
                (back.cy, gt.cy),
                (back.w, gt.w),
                (back.h, gt.h),
            ] {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shifting_the_center_by_one_stride_moves_the_cell_by_one() {
        let gt = BBox::new(40.0, 72.0, 10.0, 10.0);
        let a = encode_box(&gt, 16, 8.0, 8.0, 8, 8).unwrap();
        let shifted = BBox::new(40.0 + 16.0, 72.0, 10.0, 10.0);
        let b = encode_box(&shifted, 16, 8.0, 8.0, 8, 8).unwrap();
        assert_eq!(b.col, a.col + 1);
        assert_eq!(b.row, a.row);
        assert!((b.tx - a.tx).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_center_is_rejected() {
        let gt = BBox::new(500.0, 10.0, 4.0, 4.0);
        assert!(matches!(
            encode_box(&gt, 16, 8.0, 8.0, 8, 8),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn grid_from_raw_activates_the_right_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let raw = ArrayD::from_shape_fn(IxDyn(&[2, 5, 3, 4]), |_| rng.gen_range(-3.0..3.0));
        let grid = DetectionGrid::from_raw(&raw).unwrap();
        assert_eq!(grid.values.dim(), (2, 3, 4, 5));
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    for k in [0usize, 1, 4] {
                        let v = grid.values[[b, i, j, k]];
                        assert!(v > 0.0 && v < 1.0, "activated channel {k} out of range");
                    }
                    assert_eq!(grid.values[[b, i, j, 2]], raw[[b, 2, i, j]]);
                    assert_eq!(grid.values[[b, i, j, 3]], raw[[b, 3, i, j]]);
                }
            }
        }
        let boxes = decode_boxes(&grid, 16, 8.0, 8.0);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0].len(), 12);
    }

    #[test]
    fn best_box_ties_break_row_major() {
        let mut values = Array4::<f64>::zeros((1, 2, 2, 5));
        values[[0, 0, 1, 4]] = 0.9;
        values[[0, 1, 0, 4]] = 0.9;
        let grid = DetectionGrid { values };
        let (bbox, obj) = best_box(&grid, 0, 16, 8.0, 8.0);
        assert_eq!(obj, 0.9);
        // cell (0, 1) wins the tie against (1, 0)
        assert_eq!(bbox.cx, 16.0);
        assert_eq!(bbox.cy, 0.0);
    }
}
