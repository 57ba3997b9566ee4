//! View-specific positional encoding of the click point.
//!
//! A query image comes with one annotated pixel marking the target object.
//! The encoders turn that pixel into a dense H×W weight map which is then
//! attached to the image as an extra channel:
//!
//! * ground view: radially decaying kernel around the click, either
//!   `exp(-d²/σ)` (gaussian form, the default) or `exp(-d/σ)` (laplace
//!   form), both scaled by `1/(2σ)`;
//! * drone view: four nested square rings (Chebyshev-distance bands)
//!   spanning from the click point to the farthest image corner, each ring
//!   carrying a fixed weight, highest at the center.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel location of the annotated target object in a query image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub row: usize,
    pub col: usize,
}

impl ClickPoint {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    /// Rescales annotation coordinates when the image is resized, clamping
    /// to the new bounds.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        Self {
            row: ((self.row as f64 * sy).round() as usize).min(to.0.saturating_sub(1)),
            col: ((self.col as f64 * sx).round() as usize).min(to.1.saturating_sub(1)),
        }
    }

    fn check_bounds(&self, height: usize, width: usize) -> Result<()> {
        if self.row >= height || self.col >= width {
            return Err(Error::Precondition(format!(
                "click ({}, {}) outside {}x{} image",
                self.row, self.col, height, width
            )));
        }
        Ok(())
    }
}

/// Which kind of query image produced a sample or encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Ground,
    Drone,
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            View::Ground => write!(f, "ground"),
            View::Drone => write!(f, "drone"),
        }
    }
}

impl std::str::FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(View::Ground),
            "drone" => Ok(View::Drone),
            other => Err(Error::Config(format!("unknown view {other:?}"))),
        }
    }
}

/// Decay kernel for the ground-view encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundKernel {
    /// `exp(-d²/σ)`: squared-distance decay.
    Gaussian,
    /// `exp(-d/σ)`: absolute-distance decay.
    Laplace,
}

/// Ground-view encoder settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundEncodingConfig {
    /// Decay scale in pixels; larger spreads the weight further out.
    pub sigma: f64,
    pub kernel: GroundKernel,
    /// Rescale so the click pixel carries weight exactly 1.0. Without it
    /// the map peaks at `1/(2σ)`, far below unit-range image channels.
    pub normalize_peak: bool,
}

impl Default for GroundEncodingConfig {
    fn default() -> Self {
        Self {
            sigma: 25.0,
            kernel: GroundKernel::Gaussian,
            normalize_peak: true,
        }
    }
}

impl GroundEncodingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be a positive real, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Ring weights tried in the drone-view weighting ablation, inside-out.
/// The first entry is the shipped default.
pub const RING_WEIGHT_PRESETS: [[f64; 4]; 8] = [
    [0.60, 0.15, 0.15, 0.10],
    [0.60, 0.20, 0.15, 0.05],
    [0.40, 0.30, 0.20, 0.10],
    [0.50, 0.30, 0.10, 0.10],
    [0.70, 0.15, 0.10, 0.05],
    [0.80, 0.10, 0.05, 0.05],
    [0.60, 0.25, 0.10, 0.05],
    [0.90, 0.05, 0.05, 0.00],
];

/// Drone-view encoder settings: one weight per square ring, inside-out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneEncodingConfig {
    pub weights: [f64; 4],
}

impl Default for DroneEncodingConfig {
    fn default() -> Self {
        Self {
            weights: RING_WEIGHT_PRESETS[0],
        }
    }
}

impl DroneEncodingConfig {
    fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "ring weights must be non-negative, got {:?}",
                self.weights
            )));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ring weights must sum to 1.0, got {sum}"
            )));
        }
        // the click pixel lives in ring 1; it can only attain the map
        // maximum if the innermost weight dominates
        if self.weights[1..].iter().any(|w| *w > self.weights[0]) {
            return Err(Error::Config(format!(
                "innermost ring weight must be the largest, got {:?}",
                self.weights
            )));
        }
        Ok(())
    }
}

/// H×W matrix of positional weights around the click point.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingMap {
    pub values: Array2<f64>,
    pub view: View,
}

impl EncodingMap {
    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Maximum weight anywhere in the map.
    pub fn peak(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Builds the ground-view encoding: radial decay from the click point.
pub fn ground_encoding(
    height: usize,
    width: usize,
    click: ClickPoint,
    config: &GroundEncodingConfig,
) -> Result<EncodingMap> {
    config.validate()?;
    click.check_bounds(height, width)?;
    let sigma = config.sigma;
    let amplitude = 1.0 / (2.0 * sigma);
    let mut values = Array2::<f64>::zeros((height, width));
    for i in 0..height {
        let dr = i as f64 - click.row as f64;
        for j in 0..width {
            let dc = j as f64 - click.col as f64;
            let d2 = dr * dr + dc * dc;
            values[[i, j]] = match config.kernel {
                GroundKernel::Gaussian => amplitude * (-d2 / sigma).exp(),
                GroundKernel::Laplace => amplitude * (-d2.sqrt() / sigma).exp(),
            };
        }
    }
    if config.normalize_peak {
        let peak = values[[click.row, click.col]];
        values.mapv_inplace(|v| v / peak);
    }
    Ok(EncodingMap {
        values,
        view: View::Ground,
    })
}

/// Chebyshev distance from the click to the farthest image corner; the
/// outermost ring ends exactly there, so every pixel lands in a ring.
fn max_corner_chebyshev(height: usize, width: usize, click: ClickPoint) -> usize {
    let dr = click.row.max(height - 1 - click.row);
    let dc = click.col.max(width - 1 - click.col);
    dr.max(dc)
}

/// Ring index (1..=4) of a pixel at Chebyshev distance `c` when rings have
/// equal width `radius/4`.
fn ring_index(c: usize, radius: usize) -> usize {
    if c == 0 || radius == 0 {
        return 1;
    }
    ((4 * c).div_ceil(radius)).clamp(1, 4)
}

/// Builds the drone-view encoding: four weighted square rings around the
/// click point.
pub fn drone_encoding(
    height: usize,
    width: usize,
    click: ClickPoint,
    config: &DroneEncodingConfig,
) -> Result<EncodingMap> {
    config.validate()?;
    click.check_bounds(height, width)?;
    let radius = max_corner_chebyshev(height, width, click);
    let mut values = Array2::<f64>::zeros((height, width));
    for i in 0..height {
        let dr = i.abs_diff(click.row);
        for j in 0..width {
            let c = dr.max(j.abs_diff(click.col));
            values[[i, j]] = config.weights[ring_index(c, radius) - 1];
        }
    }
    Ok(EncodingMap {
        values,
        view: View::Drone,
    })
}

/// Appends the encoding map to a `C×H×W` image as channel `C`.
pub fn attach_encoding(image: &Array3<f64>, map: &EncodingMap) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if (h, w) != (map.height(), map.width()) {
        return Err(Error::Shape(format!(
            "encoding map {}x{} does not match image {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    let mut out = Array3::<f64>::zeros((c + 1, h, w));
    out.slice_mut(ndarray::s![..c, .., ..]).assign(image);
    out.slice_mut(ndarray::s![c, .., ..]).assign(&map.values);
    Ok(out)
}
