//! Cross-view object geo-localization toolkit.
//!
//! Given a query image (ground panorama or drone photo) with a single
//! click-annotated target object, the pipeline localizes that object as a
//! bounding box inside a satellite reference image:
//!
//! 1. [`vspe`] builds a view-specific positional-encoding map around the
//!    click point and attaches it to the query image as an extra channel.
//! 2. [`csha`] refines the query branch features with channel attention
//!    followed by spatial attention.
//! 3. [`model`] runs a two-branch network (query descriptor + satellite
//!    feature map), fuses them, and predicts a box on a detection grid.
//! 4. [`eval`] scores predictions with IoU and acc@τ, plus the top-5
//!    patch-retrieval protocol used for retrieval-style baselines.
//! 5. [`data`] loads JSONL manifests and generates synthetic cross-view
//!    scenes so the whole pipeline trains and evaluates on a CPU desk setup.
//!
//! Everything is f64 end to end, backed by a small tape-based reverse-mode
//! autodiff ([`tape`]) so analytic gradients can be validated against finite
//! differences.

pub mod container;
pub mod csha;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod run;
pub mod tape;
pub mod vspe;

pub use error::{Error, Result};
pub use model::bbox::BBox;
pub use vspe::{ClickPoint, View};
