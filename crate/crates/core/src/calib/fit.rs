//! Shared optimizer loop for the logit-space calibrators.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::subject::Subject;
use crate::train::{EpochRecord, PlateauSchedule, TrainingLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-3,
            max_epochs: 50,
            batch_size: 1,
            plateau_patience: 5,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            min_improvement: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("fit learning_rate must be > 0".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Parameter("fit plateau_factor must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("fit batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log: TrainingLog,
    pub warnings: Vec<String>,
}

/// Minimizes the mean per-subject loss of a flat parameter vector with Adam,
/// plateau decay and early stopping on `stop` subjects. Returns the best
/// parameters seen on `stop` (the initial ones included).
pub(crate) fn fit_loop<T: Real>(
    init: Vec<T>,
    fit: &[&Subject<T>],
    stop: &[&Subject<T>],
    cfg: &FitConfig,
    loss_grad: impl Fn(&[T], &Subject<T>) -> Result<(T, Vec<T>)>,
) -> Result<(Vec<T>, FitReport)> {
    cfg.validate()?;
    if fit.is_empty() || stop.is_empty() {
        return Err(Error::Data("calibrator fitting needs subjects with cached logits".into()));
    }
    let mut report = FitReport::default();
    let (mut pos, mut neg) = (false, false);
    for s in fit {
        for (&y, &m) in s.labels.values().iter().zip(s.eval_mask.values()) {
            if m != T::zero() {
                if y == T::one() {
                    pos = true;
                } else {
                    neg = true;
                }
            }
        }
    }
    if !(pos && neg) {
        let msg = "fit labels contain a single class; the offset may drift until early stopping".to_string();
        log::warn!("{msg}");
        report.warnings.push(msg);
    }

    let eval = |p: &[T]| -> Result<f64> {
        let mut total = 0.0;
        for s in stop {
            total += loss_grad(p, s)?.0.to_f64_lossy();
        }
        Ok(total / stop.len() as f64)
    };

    let mut params = init;
    if cfg.max_epochs == 0 {
        return Ok((params, report));
    }
    let initial = eval(&params)?;
    report.log.initial_val_loss = Some(initial);
    let mut best = params.clone();
    let mut schedule = PlateauSchedule::new(
        cfg.learning_rate,
        initial,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.early_stop_patience,
        cfg.min_improvement,
    );
    let mut adam = AdamState::<T>::new([params.len()]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![T::zero(); params.len()];
            let scale = T::one() / T::from_usize_lossy(batch.len());
            for &i in batch {
                let (l, g) = loss_grad(&params, fit[i])?;
                epoch_loss += l.to_f64_lossy();
                grad.iter_mut().zip(&g).for_each(|(a, &b)| *a += scale * b);
            }
            adam.update(&mut [&mut params], &[&grad], &[true], T::lit(schedule.lr));
        }
        let train_loss = epoch_loss / fit.len() as f64;
        let val_loss = eval(&params)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                message: format!("calibrator fit diverged at epoch {epoch}"),
                log: Box::new(report.log),
            });
        }
        let lr_used = schedule.lr;
        let verdict = schedule.observe(val_loss);
        if verdict.improved {
            best = params.clone();
            report.log.best_epoch = Some(epoch);
        }
        report.log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr_used,
            improved: verdict.improved,
        });
        if verdict.stop {
            report.log.stopped_early = true;
            break;
        }
    }
    report.log.best_val_loss = Some(schedule.best);
    Ok((best, report))
}
