//! Confidence calibration for binary segmentation networks.
//!
//! The crate covers a synthetic segmentation task with a known voxel
//! posterior, a small convolutional network with optional dropout, the
//! CE / soft Dice training regimes, post hoc calibrators (Platt scaling,
//! auxiliary convolution, last-layer fine-tuning, MC dropout), and the
//! metrics used to compare them (masked ECE, reliability bins, Dice,
//! Wilcoxon signed-rank test).
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix the scalar to `f64`, which is what the experiment harness uses.

pub mod adam;
pub mod calib;
pub mod error;
pub mod eval;
pub mod folds;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod scalar;
pub mod subject;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use folds::{split_folds, FoldSplit};
pub use grid::{make_grid, sigmoid, Grid2D};
pub use scalar::Real;
pub use subject::Subject;

pub type Grid = Grid2D<f64>;
pub type Grid32 = Grid2D<f32>;
pub type SubjectF64 = Subject<f64>;
pub type Net = net::NetParams<f64>;
pub type Net32 = net::NetParams<f32>;
pub type Platt = calib::PlattParams<f64>;
pub type AuxConv = calib::AuxConvParams<f64>;
pub type PredictorF64 = calib::Predictor<f64>;
