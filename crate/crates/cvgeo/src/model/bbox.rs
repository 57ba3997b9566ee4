//! Axis-aligned bounding boxes in reference-image pixel coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box in center format; pixel extents follow the half-open convention
/// `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds from corner coordinates `(x0, y0)` inclusive, `(x1, y1)`
    /// exclusive.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)` corners.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        if self.is_degenerate() {
            0.0
        } else {
            self.w * self.h
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0)
    }

    /// Scales x-coordinates by `sx` and y-coordinates by `sy`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            cx: self.cx * sx,
            cy: self.cy * sy,
            w: self.w * sx,
            h: self.h * sy,
        }
    }

    /// True if the box overlaps the image rectangle at all.
    pub fn intersects_image(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x1 > 0.0 && y1 > 0.0 && x0 < width as f64 && y0 < height as f64 && !self.is_degenerate()
    }

    /// Checks the sample invariant: positive extent, fully inside the image.
    pub fn validate_within(&self, width: usize, height: usize) -> Result<()> {
        if self.is_degenerate() {
            return Err(Error::Validation(format!(
                "degenerate box w={} h={}",
                self.w, self.h
            )));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x0 < 0.0 || y0 < 0.0 || x1 > width as f64 || y1 > height as f64 {
            return Err(Error::Validation(format!(
                "box [{x0:.1}, {y0:.1}, {x1:.1}, {y1:.1}] outside {width}x{height} image"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_round_trip() {
        let b = BBox::from_corners(2.0, 3.0, 10.0, 7.0);
        assert_eq!(b, BBox::new(6.0, 5.0, 8.0, 4.0));
        assert_eq!(b.corners(), (2.0, 3.0, 10.0, 7.0));
        assert_eq!(b.area(), 32.0);
    }

    #[test]
    fn degenerate_boxes_have_zero_area() {
        assert_eq!(BBox::new(5.0, 5.0, 0.0, 3.0).area(), 0.0);
        assert_eq!(BBox::new(5.0, 5.0, -1.0, 3.0).area(), 0.0);
    }

    #[test]
    fn validation_tracks_image_bounds() {
        let b = BBox::new(8.0, 8.0, 4.0, 4.0);
        assert!(b.validate_within(16, 16).is_ok());
        assert!(b.validate_within(9, 16).is_err());
        assert!(BBox::new(5.0, 5.0, 0.0, 2.0).validate_within(16, 16).is_err());
    }
}
