//! Post hoc calibration: Platt scaling, an auxiliary convolution over the
//! logit map, last-layer fine-tuning and MC dropout, behind one predictor type.

mod aux;
mod fit;
mod mc;
mod pipeline;
mod platt;

pub use aux::{apply_aux_conv, fit_aux_conv, AuxConvParams, DEFAULT_AUX_KERNEL};
pub use fit::{FitConfig, FitReport};
pub use mc::{mc_predict, McConfig, McPrediction, DEFAULT_MC_SAMPLES};
pub use pipeline::{
    calibrate_pipeline, subject_seed, with_base_logits, CalibratedModel, CalibrationMethod, Calibrator,
    FoldData, PipelineConfig, PipelineReport, Predictor,
};
pub use platt::{apply_platt, fit_platt, PlattParams};
