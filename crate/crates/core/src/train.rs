//! Mini-batch training with plateau decay and early stopping, plus the
//! fine-tuning and dropout-retraining procedures built on it.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, LossKind};
use crate::net::{
    backward, forward_from, prefix_activation, Activation, DropoutConfig, DropoutSite, Gradients,
    NetParams, LAYER_COUNT,
};
use crate::scalar::Real;
use crate::subject::Subject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Whole subjects per optimizer step.
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    /// Validation loss must drop by more than this to count as improvement.
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            learning_rate: 5e-3,
            max_epochs: 50,
            batch_size: 4,
            plateau_patience: 5,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            min_improvement: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Parameter(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Validation loss of the starting weights.
    pub initial_val_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    /// `None` when the starting weights were never beaten.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Learning-rate plateau decay and early stopping on a monitored loss.
#[derive(Clone, Debug)]
pub(crate) struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    since_improvement: usize,
    since_decay: usize,
    factor: f64,
    plateau_patience: usize,
    stop_patience: usize,
    min_improvement: f64,
}

pub(crate) struct Verdict {
    pub improved: bool,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(
        lr: f64,
        initial: f64,
        factor: f64,
        plateau_patience: usize,
        stop_patience: usize,
        min_improvement: f64,
    ) -> Self {
        Self {
            lr,
            best: initial,
            since_improvement: 0,
            since_decay: 0,
            factor,
            plateau_patience,
            stop_patience,
            min_improvement,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        let improved = loss < self.best - self.min_improvement;
        if improved {
            self.best = loss;
            self.since_improvement = 0;
            self.since_decay = 0;
        } else {
            self.since_improvement += 1;
            self.since_decay += 1;
            if self.since_decay >= self.plateau_patience {
                self.lr *= self.factor;
                self.since_decay = 0;
            }
        }
        Verdict {
            improved,
            stop: self.since_improvement >= self.stop_patience,
        }
    }
}

fn divergence(message: String, log: &TrainingLog) -> Error {
    Error::Training {
        message,
        log: Box::new(log.clone()),
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined word
    let mut z = seed ^ stream.wrapping_mul(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub(crate) fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(seed, stream))
}

/// Mean per-subject loss with dropout disabled.
pub fn evaluate_loss<T: Real>(
    params: &NetParams<T>,
    subjects: &[Subject<T>],
    loss: LossKind,
) -> Result<f64> {
    let prefixes: Vec<Activation<T>> = subjects
        .par_iter()
        .map(|s| prefix_activation(params, &s.image, 0))
        .collect();
    mean_loss_from(params, 0, &prefixes, subjects, loss)
}

fn mean_loss_from<T: Real>(
    params: &NetParams<T>,
    start: usize,
    prefixes: &[Activation<T>],
    subjects: &[Subject<T>],
    loss: LossKind,
) -> Result<f64> {
    let none = DropoutConfig::none();
    let losses: Vec<f64> = prefixes
        .par_iter()
        .zip(subjects.par_iter())
        .map(|(act, s)| {
            let (z, _) = forward_from::<T, ChaCha8Rng>(params, start, act.clone(), &none, None)?;
            let (l, _) = loss_and_grad(loss, &z, &s.labels, &s.eval_mask)?;
            Ok(l.to_f64_lossy())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains unfrozen layers; returns the best-validation weights.
///
/// Validation loss always uses `config.loss` without dropout. Work inside a
/// batch is spread over the rayon pool but reduced in subject order, so the
/// result does not depend on the thread count.
pub fn train<T: Real>(
    model: &NetParams<T>,
    train_subjects: &[Subject<T>],
    val_subjects: &[Subject<T>],
    config: &TrainConfig,
    dropout: &DropoutConfig,
) -> Result<(NetParams<T>, TrainingLog)> {
    train_impl(model, train_subjects, val_subjects, config, dropout, true)
}

/// `initial_is_candidate`: whether the starting weights compete for "best".
fn train_impl<T: Real>(
    model: &NetParams<T>,
    train_subjects: &[Subject<T>],
    val_subjects: &[Subject<T>],
    config: &TrainConfig,
    dropout: &DropoutConfig,
    initial_is_candidate: bool,
) -> Result<(NetParams<T>, TrainingLog)> {
    config.validate()?;
    dropout.validate()?;
    model.validate()?;
    let mut log = TrainingLog::default();
    if config.max_epochs == 0 {
        return Ok((model.clone(), log));
    }
    if train_subjects.is_empty() || val_subjects.is_empty() {
        return Err(Error::Data("training needs nonempty train and validation sets".into()));
    }
    let Some(first_trainable) = model.first_unfrozen() else {
        return Ok((model.clone(), log));
    };
    // Layers below `start` are frozen and see no dropout, so their output is fixed.
    let start = dropout
        .first_site_layer()
        .map_or(first_trainable, |s| s.min(first_trainable));

    let train_prefix: Vec<Activation<T>> = train_subjects
        .par_iter()
        .map(|s| prefix_activation(model, &s.image, start))
        .collect();
    let val_prefix: Vec<Activation<T>> = val_subjects
        .par_iter()
        .map(|s| prefix_activation(model, &s.image, start))
        .collect();

    let mut params = model.clone();
    let initial = mean_loss_from(&params, start, &val_prefix, val_subjects, config.loss).map_err(|e| match e {
        Error::NumericOverflow(m) => divergence(m, &log),
        other => other,
    })?;
    if !initial.is_finite() {
        return Err(divergence("non-finite initial validation loss".into(), &log));
    }
    log.initial_val_loss = Some(initial);
    let mut best_params = params.clone();
    let mut schedule = PlateauSchedule::new(
        config.learning_rate,
        if initial_is_candidate { initial } else { f64::INFINITY },
        config.plateau_factor,
        config.plateau_patience,
        config.early_stop_patience,
        config.min_improvement,
    );

    let trainable: Vec<bool> = params
        .layers
        .iter()
        .flat_map(|l| [!l.frozen, !l.frozen])
        .collect();
    let mut adam = AdamState::<T>::new(params.layers.iter().flat_map(|l| [l.weights.len(), l.bias.len()]));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_subjects.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.next_u64()).collect();
            let results: Vec<(f64, Gradients<T>)> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| {
                    let s = &train_subjects[i];
                    let mut local = ChaCha8Rng::seed_from_u64(seed);
                    let (z, cache) =
                        forward_from(&params, start, train_prefix[i].clone(), dropout, Some(&mut local))?;
                    let (l, dz) = loss_and_grad(config.loss, &z, &s.labels, &s.eval_mask)?;
                    let g = backward(&params, &cache, &dz)?;
                    Ok((l.to_f64_lossy(), g))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NumericOverflow(m) => divergence(m, &log),
                    other => other,
                })?;
            let scale = T::one() / T::from_usize_lossy(batch.len());
            let mut grads = Gradients::zeros_like(&params);
            for (l, g) in &results {
                epoch_loss += l;
                grads.add_scaled(g, scale);
            }
            let grad_refs: Vec<&[T]> = grads
                .weights
                .iter()
                .zip(&grads.bias)
                .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
                .collect();
            let mut param_refs: Vec<&mut [T]> = params
                .layers
                .iter_mut()
                .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
                .collect();
            adam.update(&mut param_refs, &grad_refs, &trainable, T::lit(schedule.lr));
        }
        let train_loss = epoch_loss / train_subjects.len() as f64;
        if !train_loss.is_finite() || !params.flatten().iter().all(|v| v.is_finite()) {
            return Err(divergence(format!("non-finite training loss at epoch {epoch}"), &log));
        }
        let val_loss = mean_loss_from(&params, start, &val_prefix, val_subjects, config.loss)
            .map_err(|e| match e {
                Error::NumericOverflow(m) => divergence(m, &log),
                other => other,
            })?;
        if !val_loss.is_finite() {
            return Err(divergence(format!("non-finite validation loss at epoch {epoch}"), &log));
        }
        let lr_used = schedule.lr;
        let verdict = schedule.observe(val_loss);
        if verdict.improved {
            best_params = params.clone();
            log.best_epoch = Some(epoch);
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr_used,
            improved: verdict.improved,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr_used:.2e}");
        if verdict.stop {
            log.stopped_early = true;
            break;
        }
    }
    log.best_val_loss = Some(schedule.best);
    Ok((best_params, log))
}

/// Base-model weight regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightRegime {
    /// CE pretraining, CE continuation.
    #[serde(rename = "CE")]
    Ce,
    /// CE pretraining, soft Dice continuation.
    #[serde(rename = "CE_SD")]
    CeSd,
    /// Soft Dice from initialization.
    #[serde(rename = "SD")]
    Sd,
}

impl WeightRegime {
    pub const ALL: [WeightRegime; 3] = [WeightRegime::Ce, WeightRegime::CeSd, WeightRegime::Sd];

    pub fn name(self) -> &'static str {
        match self {
            WeightRegime::Ce => "CE",
            WeightRegime::CeSd => "CE_SD",
            WeightRegime::Sd => "SD",
        }
    }

    pub fn main_loss(self) -> LossKind {
        match self {
            WeightRegime::Ce => LossKind::CrossEntropy,
            WeightRegime::CeSd | WeightRegime::Sd => LossKind::SoftDice,
        }
    }

    pub fn uses_pretraining(self) -> bool {
        !matches!(self, WeightRegime::Sd)
    }

    /// Fine-tuning rate: 1e-4 for CE-trained weights, 1e-3 for SD-based weights.
    pub fn finetune_learning_rate(self) -> f64 {
        match self {
            WeightRegime::Ce => 1e-4,
            WeightRegime::CeSd | WeightRegime::Sd => 1e-3,
        }
    }

    /// Loss used when retraining after dropout insertion.
    pub fn retrain_loss(self) -> LossKind {
        self.main_loss()
    }
}

impl std::fmt::Display for WeightRegime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WeightRegime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "CE" => Ok(WeightRegime::Ce),
            "CE_SD" => Ok(WeightRegime::CeSd),
            "SD" => Ok(WeightRegime::Sd),
            other => Err(Error::Configuration(format!("unknown weight regime {other:?}"))),
        }
    }
}

/// CE pretraining (when the regime uses it) followed by the regime's main loss.
///
/// `pretrained` short-circuits the pretraining stage so that CE and CE_SD can
/// share one pretrained checkpoint.
pub fn train_regime<T: Real>(
    init: &NetParams<T>,
    regime: WeightRegime,
    train_subjects: &[Subject<T>],
    val_subjects: &[Subject<T>],
    pretrain: &TrainConfig,
    main: &TrainConfig,
    pretrained: Option<&NetParams<T>>,
) -> Result<(NetParams<T>, Vec<TrainingLog>)> {
    let mut logs = Vec::new();
    let start = if regime.uses_pretraining() {
        match pretrained {
            Some(p) => p.clone(),
            None => {
                let cfg = TrainConfig {
                    loss: LossKind::CrossEntropy,
                    ..pretrain.clone()
                };
                let (p, l) = train(init, train_subjects, val_subjects, &cfg, &DropoutConfig::none())?;
                logs.push(l);
                p
            }
        }
    } else {
        init.clone()
    };
    let cfg = TrainConfig {
        loss: regime.main_loss(),
        ..main.clone()
    };
    let (p, l) = train(&start, train_subjects, val_subjects, &cfg, &DropoutConfig::none())?;
    logs.push(l);
    Ok((p, logs))
}

/// Retrains only the logit head with cross-entropy; L1-L3 stay bit-identical.
pub fn finetune_last_layer<T: Real>(
    model: &NetParams<T>,
    train_subjects: &[Subject<T>],
    val_subjects: &[Subject<T>],
    config: &TrainConfig,
) -> Result<(NetParams<T>, TrainingLog)> {
    if config.loss != LossKind::CrossEntropy {
        return Err(Error::Configuration("fine-tuning must use cross-entropy".into()));
    }
    let mut p = model.clone();
    p.freeze_below(LAYER_COUNT - 1);
    train(&p, train_subjects, val_subjects, config, &DropoutConfig::none())
}

/// Dropout placements for MC sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DropoutPlacement {
    Decoder,
    Center,
}

impl DropoutPlacement {
    pub fn config(self, rate: f64) -> Result<DropoutConfig> {
        match self {
            DropoutPlacement::Decoder => DropoutConfig::decoder(rate),
            DropoutPlacement::Center => DropoutConfig::center(rate),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRun {
    pub learning_rate: f64,
    pub best_val_loss: f64,
    pub log: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome<T> {
    pub params: NetParams<T>,
    pub dropout: DropoutConfig,
    pub chosen_learning_rate: f64,
    pub candidates: Vec<CandidateRun>,
}

/// Inserts dropout, freezes every layer before the earliest site, and retrains
/// the rest once per candidate learning rate; the lowest validation loss wins.
#[allow(clippy::too_many_arguments)]
pub fn insert_dropout_and_retrain<T: Real>(
    model: &NetParams<T>,
    placement: DropoutPlacement,
    rate: f64,
    train_subjects: &[Subject<T>],
    val_subjects: &[Subject<T>],
    loss: LossKind,
    lr_candidates: &[f64],
    base: &TrainConfig,
) -> Result<RetrainOutcome<T>> {
    if lr_candidates.is_empty() {
        return Err(Error::Configuration("no learning-rate candidates".into()));
    }
    let dropout = placement.config(rate)?;
    let first_site = dropout
        .sites
        .iter()
        .map(|s: &DropoutSite| s.layer())
        .min()
        .expect("placements have sites");
    let mut frozen = model.clone();
    frozen.freeze_below(first_site);

    let mut best: Option<(usize, f64, NetParams<T>)> = None;
    let mut candidates = Vec::with_capacity(lr_candidates.len());
    for (i, &lr) in lr_candidates.iter().enumerate() {
        let cfg = TrainConfig {
            loss,
            learning_rate: lr,
            ..base.clone()
        };
        // The inserted dropout changes the function being trained, so only
        // retrained epochs are eligible.
        let (p, log) = train_impl(&frozen, train_subjects, val_subjects, &cfg, &dropout, false)?;
        let score = match log.best_val_loss {
            Some(v) => v,
            None => evaluate_loss(&p, val_subjects, loss)?,
        };
        log::info!("dropout retrain {placement:?} lr {lr:.0e}: best val loss {score:.6}");
        if best.as_ref().is_none_or(|(_, b, _)| score < *b) {
            best = Some((i, score, p));
        }
        candidates.push(CandidateRun {
            learning_rate: lr,
            best_val_loss: score,
            log,
        });
    }
    let (idx, _, params) = best.expect("at least one candidate");
    Ok(RetrainOutcome {
        params,
        dropout,
        chosen_learning_rate: lr_candidates[idx],
        candidates,
    })
}
