//! PNG loading/saving and tensor conversion.
//!
//! Images travel through the pipeline as `(3, H, W)` f64 tensors in
//! `[0, 1]`. Resizing is bilinear; annotation coordinates are rescaled by
//! the same factors elsewhere.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Loads a PNG as a `(3, H, W)` tensor scaled to `[0, 1]`.
pub fn load_rgb_tensor(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Validation(format!("cannot open image {path:?}: {e}")))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = pixel.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Saves a `(3, H, W)` tensor (values clamped to `[0, 1]`) as a PNG.
pub fn save_rgb_tensor(path: &Path, tensor: &Array3<f64>) -> Result<()> {
    let (c, h, w) = tensor.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            (tensor[[ch, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Saves a non-negative map as an 8-bit grayscale PNG, scaled so the map
/// maximum becomes 255 (a zero map stays black).
pub fn save_grayscale_map(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let peak = map.iter().copied().fold(0.0_f64, f64::max);
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let img = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].max(0.0) * scale).round() as u8])
    });
    img.save(path)?;
    Ok(())
}

/// Reads PNG dimensions as `(height, width)` without keeping the pixels.
pub fn image_dims(path: &Path) -> Result<(usize, usize)> {
    let dims = image::image_dimensions(path)
        .map_err(|e| Error::Validation(format!("cannot read image header {path:?}: {e}")))?;
    Ok((dims.1 as usize, dims.0 as usize))
}

/// Bilinear resize of a channel-first tensor.
pub fn resize_rgb(tensor: &Array3<f64>, to: (usize, usize)) -> Array3<f64> {
    let (c, h, w) = tensor.dim();
    let (th, tw) = to;
    if (h, w) == (th, tw) {
        return tensor.clone();
    }
    let mut out = Array3::<f64>::zeros((c, th, tw));
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    for i in 0..th {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for j in 0..tw {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let tl = tensor[[ch, y0, x0]];
                let tr = tensor[[ch, y0, x1]];
                let bl = tensor[[ch, y1, x0]];
                let br = tensor[[ch, y1, x1]];
                out[[ch, i, j]] =
                    tl * (1.0 - wy) * (1.0 - wx) + tr * (1.0 - wy) * wx + bl * wy * (1.0 - wx)
                        + br * wy * wx;
            }
        }
    }
    out
}
