use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aux::{apply_aux_conv, fit_aux_conv, AuxConvParams, DEFAULT_AUX_KERNEL};
use super::fit::{FitConfig, FitReport};
use super::mc::{mc_predict, McConfig, DEFAULT_MC_SAMPLES};
use super::platt::{apply_platt, fit_platt, PlattParams};
use crate::error::{Error, Result};
use crate::grid::{sigmoid, Grid2D};
use crate::loss::LossKind;
use crate::net::{forward, fnv1a, DropoutConfig, NetParams};
use crate::scalar::Real;
use crate::subject::Subject;
use crate::train::{
    finetune_last_layer, insert_dropout_and_retrain, CandidateRun, DropoutPlacement, TrainConfig,
    TrainingLog, WeightRegime,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CalibrationMethod {
    Base,
    Platt,
    Aux,
    Finetune,
    McDecoder,
    McCenter,
}

impl CalibrationMethod {
    pub const ALL: [CalibrationMethod; 6] = [
        CalibrationMethod::Base,
        CalibrationMethod::Platt,
        CalibrationMethod::Aux,
        CalibrationMethod::Finetune,
        CalibrationMethod::McDecoder,
        CalibrationMethod::McCenter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::Base => "BASE",
            CalibrationMethod::Platt => "PLATT",
            CalibrationMethod::Aux => "AUX",
            CalibrationMethod::Finetune => "FINETUNE",
            CalibrationMethod::McDecoder => "MC_DECODER",
            CalibrationMethod::McCenter => "MC_CENTER",
        }
    }

    pub fn is_post_hoc(self) -> bool {
        self != CalibrationMethod::Base
    }

    pub fn placement(self) -> Option<DropoutPlacement> {
        match self {
            CalibrationMethod::McDecoder => Some(DropoutPlacement::Decoder),
            CalibrationMethod::McCenter => Some(DropoutPlacement::Center),
            _ => None,
        }
    }
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Configuration(format!("unknown calibration method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Platt and aux-conv optimizer settings.
    pub fit: FitConfig,
    pub aux_kernel: usize,
    /// Fraction of the calibration split used for fitting Platt/aux; the rest
    /// drives early stopping.
    pub fit_fraction: f64,
    /// Fine-tuning schedule; the learning rate is taken from the weight regime.
    pub finetune: TrainConfig,
    /// Retraining schedule after dropout insertion; the loss follows the regime.
    pub mc_retrain: TrainConfig,
    /// Must match the regime's loss when set.
    pub mc_retrain_loss: Option<LossKind>,
    pub mc_learning_rates: Vec<f64>,
    pub dropout_rate: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fit: FitConfig::default(),
            aux_kernel: DEFAULT_AUX_KERNEL,
            fit_fraction: 2.0 / 3.0,
            finetune: TrainConfig {
                batch_size: 2,
                ..TrainConfig::default()
            },
            mc_retrain: TrainConfig::default(),
            mc_retrain_loss: None,
            mc_learning_rates: vec![1e-3, 1e-4, 1e-5],
            dropout_rate: 0.2,
            mc_samples: DEFAULT_MC_SAMPLES,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.fit.validate().map_err(as_config)?;
        if self.aux_kernel == 0 || self.aux_kernel.is_multiple_of(2) {
            return Err(Error::Configuration(format!(
                "aux_kernel must be odd, got {}",
                self.aux_kernel
            )));
        }
        if !(self.fit_fraction > 0.0 && self.fit_fraction <= 1.0) {
            return Err(Error::Configuration("fit_fraction must lie in (0, 1]".into()));
        }
        self.finetune.validate().map_err(as_config)?;
        self.mc_retrain.validate().map_err(as_config)?;
        if self.mc_learning_rates.is_empty() || self.mc_learning_rates.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::Configuration("mc_learning_rates must be nonempty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Configuration("dropout_rate must lie in [0, 1)".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Configuration("mc_samples must be >= 1".into()));
        }
        Ok(())
    }

    /// Rejects settings that contradict the weight regime for `method`.
    pub fn check_method(&self, method: CalibrationMethod, regime: WeightRegime) -> Result<()> {
        self.validate()?;
        if method.placement().is_some() {
            if let Some(loss) = self.mc_retrain_loss {
                if loss != regime.retrain_loss() {
                    return Err(Error::Configuration(format!(
                        "{method} retraining of {regime} weights must use {:?}, not {loss:?}",
                        regime.retrain_loss()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Parameter(m) => Error::Configuration(m),
        other => other,
    }
}

/// Subjects a method may touch while fitting. Evaluation subjects never enter here.
#[derive(Clone, Copy, Debug)]
pub struct FoldData<'a, T> {
    /// Training portion minus the calibration split.
    pub train: &'a [Subject<T>],
    /// Calibration / early-stopping split.
    pub calibration: &'a [Subject<T>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Calibrator<T> {
    Identity,
    Platt(PlattParams<T>),
    AuxConv(AuxConvParams<T>),
}

impl<T: Real> Calibrator<T> {
    pub fn apply(&self, logits: &Grid2D<T>) -> Grid2D<T> {
        match self {
            Calibrator::Identity => logits.map(sigmoid),
            Calibrator::Platt(p) => apply_platt(p, logits),
            Calibrator::AuxConv(p) => apply_aux_conv(p, logits),
        }
    }
}

/// Uniform `Subject -> probability map` interface over every method.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor<T> {
    Deterministic {
        net: NetParams<T>,
        calibrator: Calibrator<T>,
    },
    MonteCarlo {
        net: NetParams<T>,
        n_samples: usize,
        dropout: DropoutConfig,
        seed: u64,
    },
}

impl<T: Real> Predictor<T> {
    pub fn base(net: NetParams<T>) -> Self {
        Predictor::Deterministic {
            net,
            calibrator: Calibrator::Identity,
        }
    }

    pub fn net(&self) -> &NetParams<T> {
        match self {
            Predictor::Deterministic { net, .. } | Predictor::MonteCarlo { net, .. } => net,
        }
    }

    pub fn predict(&self, subject: &Subject<T>) -> Result<Grid2D<T>> {
        match self {
            Predictor::Deterministic { net, calibrator } => {
                let (z, _) = forward::<T, ChaCha8Rng>(net, &subject.image, &DropoutConfig::none(), None)?;
                Ok(calibrator.apply(&z))
            }
            Predictor::MonteCarlo {
                net,
                n_samples,
                dropout,
                seed,
            } => {
                let cfg = McConfig {
                    n_samples: *n_samples,
                    dropout: dropout.clone(),
                    seed: subject_seed(*seed, &subject.id),
                };
                Ok(mc_predict(net, &subject.image, &cfg)?.mean)
            }
        }
    }
}

/// MC seed for one subject, independent of evaluation order.
pub fn subject_seed(seed: u64, id: &str) -> u64 {
    seed ^ fnv1a(id.as_bytes())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub fit: Option<FitReport>,
    pub training: Option<TrainingLog>,
    pub chosen_learning_rate: Option<f64>,
    pub candidates: Vec<CandidateRun>,
}

#[derive(Clone, Debug)]
pub struct CalibratedModel<T> {
    pub method: CalibrationMethod,
    pub predictor: Predictor<T>,
    pub report: PipelineReport,
}

/// Attaches cached base-model logits to each subject.
pub fn with_base_logits<T: Real>(net: &NetParams<T>, subjects: &[Subject<T>]) -> Result<Vec<Subject<T>>> {
    use rayon::prelude::*;
    subjects
        .par_iter()
        .map(|s| {
            let (z, _) = forward::<T, ChaCha8Rng>(net, &s.image, &DropoutConfig::none(), None)?;
            s.clone().with_logits(z)
        })
        .collect()
}

/// Fits `method` on the fold's calibration split and wraps the result.
pub fn calibrate_pipeline<T: Real>(
    method: CalibrationMethod,
    base: &NetParams<T>,
    regime: WeightRegime,
    fold: FoldData<'_, T>,
    cfg: &PipelineConfig,
) -> Result<CalibratedModel<T>> {
    cfg.check_method(method, regime)?;
    base.validate()?;
    let mut report = PipelineReport::default();
    let predictor = match method {
        CalibrationMethod::Base => Predictor::base(base.clone()),
        CalibrationMethod::Platt | CalibrationMethod::Aux => {
            if fold.calibration.is_empty() {
                return Err(Error::Data("calibration split is empty".into()));
            }
            let cal = with_base_logits(base, fold.calibration)?;
            let (fit, stop) = split_for_fit(&cal, cfg.fit_fraction);
            let fit_cfg = FitConfig {
                seed: cfg.fit.seed ^ cfg.seed,
                ..cfg.fit.clone()
            };
            let (calibrator, fr) = if method == CalibrationMethod::Platt {
                let (p, r) = fit_platt(&fit, &stop, &fit_cfg)?;
                (Calibrator::Platt(p), r)
            } else {
                let (p, r) = fit_aux_conv(&fit, &stop, cfg.aux_kernel, &fit_cfg)?;
                (Calibrator::AuxConv(p), r)
            };
            report.fit = Some(fr);
            Predictor::Deterministic {
                net: base.clone(),
                calibrator,
            }
        }
        CalibrationMethod::Finetune => {
            let tc = TrainConfig {
                loss: LossKind::CrossEntropy,
                learning_rate: regime.finetune_learning_rate(),
                seed: cfg.finetune.seed ^ cfg.seed,
                ..cfg.finetune.clone()
            };
            let (mut net, log) = finetune_last_layer(base, fold.train, fold.calibration, &tc)?;
            net.set_frozen(base.frozen_flags());
            report.training = Some(log);
            Predictor::base(net)
        }
        CalibrationMethod::McDecoder | CalibrationMethod::McCenter => {
            let placement = method.placement().expect("MC method");
            let tc = TrainConfig {
                seed: cfg.mc_retrain.seed ^ cfg.seed,
                ..cfg.mc_retrain.clone()
            };
            let out = insert_dropout_and_retrain(
                base,
                placement,
                cfg.dropout_rate,
                fold.train,
                fold.calibration,
                regime.retrain_loss(),
                &cfg.mc_learning_rates,
                &tc,
            )?;
            let mut net = out.params;
            net.set_frozen(base.frozen_flags());
            report.chosen_learning_rate = Some(out.chosen_learning_rate);
            report.candidates = out.candidates;
            Predictor::MonteCarlo {
                net,
                n_samples: cfg.mc_samples,
                dropout: out.dropout,
                seed: cfg.seed,
            }
        }
    };
    Ok(CalibratedModel {
        method,
        predictor,
        report,
    })
}

/// First `fraction` of the subjects fit, the remainder stops. A single
/// subject serves both roles.
fn split_for_fit<T>(subjects: &[Subject<T>], fraction: f64) -> (Vec<&Subject<T>>, Vec<&Subject<T>>) {
    let n = subjects.len();
    if n == 1 {
        return (vec![&subjects[0]], vec![&subjects[0]]);
    }
    let n_fit = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    let (a, b) = subjects.split_at(n_fit);
    (a.iter().collect(), b.iter().collect())
}
