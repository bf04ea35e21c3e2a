//! Cross-validated train -> calibrate -> evaluate grid.

use std::collections::{BTreeMap, BTreeSet};

use anyhow::{bail, Context};
use log::{info, warn};
use rayon::prelude::*;
use segcal::calib::{calibrate_pipeline, subject_seed, CalibrationMethod, FoldData, PipelineConfig};
use segcal::eval::{evaluate_predictor, Evaluation};
use segcal::loss::LossKind;
use segcal::metrics::{best_marking, ece, ConfidenceMode, Direction, ReliabilityBins};
use segcal::net::DropoutConfig;
use segcal::train::{train, train_regime, TrainConfig, WeightRegime};
use segcal::{split_folds, Grid, Net, SubjectF64};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::format::load_dataset;

/// Probabilities strictly inside this band count as "soft" predictions.
pub const SOFT_BAND: (f64, f64) = (0.05, 0.95);

/// Subject ids of one fold, each list in dataset order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub fold: usize,
    pub folds: usize,
    /// Network training subjects.
    pub train: Vec<String>,
    /// Calibration fitting and early stopping.
    pub calibration: Vec<String>,
    /// Held-out subjects; only ever scored.
    pub evaluation: Vec<String>,
}

impl FoldPartition {
    /// Fails if any scored subject was also used for fitting.
    pub fn assert_hygiene(&self, scored: &[&str]) -> anyhow::Result<()> {
        let fitted: BTreeSet<&str> = self
            .train
            .iter()
            .chain(&self.calibration)
            .map(String::as_str)
            .collect();
        let eval: BTreeSet<&str> = self.evaluation.iter().map(String::as_str).collect();
        for id in scored {
            if fitted.contains(id) || !eval.contains(id) {
                bail!("fold {}: subject {id} was scored but is not held out", self.fold);
            }
        }
        Ok(())
    }
}

/// Seed for one named stage of one fold.
pub fn stage_seed(seed: u64, stage: &str, fold: usize) -> u64 {
    subject_seed(seed, &format!("{stage}/{fold}"))
}

/// Splits `ids` into folds, then splits each fold's training portion into
/// training and calibration subsets.
pub fn fold_partitions(
    ids: &[String],
    folds: usize,
    seed: u64,
    calibration_fraction: f64,
) -> anyhow::Result<Vec<FoldPartition>> {
    let split = split_folds(ids, folds, seed)?;
    (0..folds)
        .map(|fold| {
            let evaluation: Vec<String> = split.members(fold, ids).into_iter().cloned().collect();
            let rest: Vec<&String> = ids.iter().filter(|id| split.fold_of(id) != Some(fold)).collect();
            if rest.len() < 2 {
                bail!("fold {fold}: need at least 2 training subjects, have {}", rest.len());
            }
            let n_cal = ((rest.len() as f64 * calibration_fraction).ceil() as usize).clamp(1, rest.len() - 1);
            let salt = stage_seed(seed, "calibration-split", fold);
            let mut ranked: Vec<&String> = rest.clone();
            ranked.sort_by_key(|id| (subject_seed(salt, id), (*id).clone()));
            let cal: BTreeSet<&String> = ranked[..n_cal].iter().copied().collect();
            let (calibration, train): (Vec<&String>, Vec<&String>) = rest.iter().partition(|id| cal.contains(*id));
            Ok(FoldPartition {
                fold,
                folds,
                train: train.into_iter().cloned().collect(),
                calibration: calibration.into_iter().cloned().collect(),
                evaluation,
            })
        })
        .collect()
}

/// Subjects with the given ids, in the order of `ids`.
pub fn select(subjects: &[SubjectF64], ids: &[String]) -> anyhow::Result<Vec<SubjectF64>> {
    let by_id: BTreeMap<&str, &SubjectF64> = subjects.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .with_context(|| format!("subject {id} is not in the dataset"))
        })
        .collect()
}

/// Loads or generates the configured dataset.
pub fn load_subjects(cfg: &RunConfig) -> anyhow::Result<Vec<SubjectF64>> {
    let subjects: Vec<SubjectF64> = match (&cfg.dataset.path, cfg.dataset.subjects) {
        (Some(dir), _) => load_dataset(dir)?.into_iter().map(|s| s.subject).collect(),
        (None, Some(n)) => segcal::synth::render_dataset(&cfg.synth_config(), n)?,
        (None, None) => bail!("no dataset configured"),
    };
    let ids: BTreeSet<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
    if ids.len() != subjects.len() {
        bail!("dataset has duplicate subject ids");
    }
    Ok(subjects)
}

/// Masked voxels with soft probabilities, and all masked voxels.
pub fn soft_counts(subjects: &[SubjectF64], probs: &[Grid]) -> (u64, u64) {
    let (mut soft, mut total) = (0u64, 0u64);
    for (s, p) in subjects.iter().zip(probs) {
        for (&m, &v) in s.eval_mask.values().iter().zip(p.values()) {
            if m > 0.5 {
                total += 1;
                if v > SOFT_BAND.0 && v < SOFT_BAND.1 {
                    soft += 1;
                }
            }
        }
    }
    (soft, total)
}

#[derive(Clone, Debug)]
struct CellFold {
    evaluation: Evaluation,
    soft: (u64, u64),
    chosen_learning_rate: Option<f64>,
}

type FoldCells = BTreeMap<(WeightRegime, CalibrationMethod), Result<CellFold, String>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// Sorted; the per-subject vectors follow this order.
    pub subject_ids: Vec<String>,
    pub dice: Vec<f64>,
    pub ece: Vec<f64>,
    pub mean_dice: f64,
    /// Mean of per-subject ECE, as a fraction.
    pub mean_ece: f64,
    /// ECE of the bins pooled over all evaluated subjects.
    pub pooled_ece: f64,
    /// Share of masked voxels with probability strictly inside `SOFT_BAND`.
    pub soft_fraction: f64,
    /// Best or not significantly different from the best within the regime.
    pub best_dice: bool,
    pub best_ece: bool,
    /// Paired Wilcoxon p against the regime's best; `None` for the best itself.
    pub p_dice: Option<f64>,
    pub p_ece: Option<f64>,
    /// MC retraining learning rate picked in each fold.
    pub chosen_learning_rates: Vec<Option<f64>>,
    pub bins: ReliabilityBins,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub regime: WeightRegime,
    pub method: CalibrationMethod,
    pub metrics: Option<CellMetrics>,
    /// Diagnostic of the first failing stage.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub regimes: Vec<WeightRegime>,
    pub methods: Vec<CalibrationMethod>,
    pub folds: usize,
    pub bins: usize,
    pub confidence_mode: ConfidenceMode,
    pub min_bin_count: u64,
    pub alpha: f64,
    /// Regime-major order.
    pub cells: Vec<CellResult>,
}

impl ResultsTable {
    pub fn cell(&self, regime: WeightRegime, method: CalibrationMethod) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.regime == regime && c.method == method)
    }

    pub fn metrics(&self, regime: WeightRegime, method: CalibrationMethod) -> Option<&CellMetrics> {
        self.cell(regime, method).and_then(|c| c.metrics.as_ref())
    }

    /// Largest gap between a stored mean and the mean recomputed from its vector.
    pub fn mean_consistency(&self) -> f64 {
        self.cells
            .iter()
            .filter_map(|c| c.metrics.as_ref())
            .flat_map(|m| [(m.mean_dice - mean(&m.dice)).abs(), (m.mean_ece - mean(&m.ece)).abs()])
            .fold(0.0, f64::max)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Initial weights and stage configurations of one fold, seeded from the run seed.
#[derive(Clone, Debug)]
pub struct FoldSettings {
    pub init: Net,
    pub pretrain: TrainConfig,
    pub main: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl FoldSettings {
    pub fn new(cfg: &RunConfig, fold: usize) -> Self {
        let seeded = |tc: &TrainConfig, stage: &str| TrainConfig {
            seed: tc.seed ^ stage_seed(cfg.seed, stage, fold),
            ..tc.clone()
        };
        Self {
            init: Net::init(stage_seed(cfg.seed, "init", fold)),
            pretrain: TrainConfig {
                loss: LossKind::CrossEntropy,
                ..seeded(&cfg.pretrain, "pretrain")
            },
            main: seeded(&cfg.train, "train"),
            pipeline: PipelineConfig {
                seed: cfg.pipeline.seed ^ stage_seed(cfg.seed, "pipeline", fold),
                ..cfg.pipeline.clone()
            },
        }
    }

    /// Base weights for one regime, including CE pretraining where the regime uses it.
    pub fn train_base(&self, regime: WeightRegime, train_set: &[SubjectF64], cal_set: &[SubjectF64]) -> segcal::Result<Net> {
        train_regime(&self.init, regime, train_set, cal_set, &self.pretrain, &self.main, None).map(|(p, _)| p)
    }
}

fn run_fold(cfg: &RunConfig, subjects: &[SubjectF64], part: &FoldPartition) -> anyhow::Result<FoldCells> {
    let fold = part.fold;
    let train_set = select(subjects, &part.train)?;
    let cal_set = select(subjects, &part.calibration)?;
    let eval_set = select(subjects, &part.evaluation)?;
    let FoldSettings {
        init,
        pretrain: pretrain_cfg,
        main: main_cfg,
        pipeline: pipeline_cfg,
    } = FoldSettings::new(cfg, fold);

    let pretrained = if cfg.regimes.iter().any(|r| r.uses_pretraining()) {
        info!("fold {fold}: CE pretraining on {} subjects", train_set.len());
        Some(
            train(&init, &train_set, &cal_set, &pretrain_cfg, &DropoutConfig::none())
                .map(|(p, _)| p)
                .map_err(|e| format!("CE pretraining failed: {e}")),
        )
    } else {
        None
    };

    let mut cells = FoldCells::new();
    for &regime in &cfg.regimes {
        let base = match (&pretrained, regime.uses_pretraining()) {
            (Some(Err(e)), true) => Err(e.clone()),
            (p, _) => {
                info!("fold {fold}: training {regime} weights");
                let pre = match p {
                    Some(Ok(net)) => Some(net),
                    _ => None,
                };
                train_regime(&init, regime, &train_set, &cal_set, &pretrain_cfg, &main_cfg, pre)
                    .map(|(p, _)| p)
                    .map_err(|e| format!("{regime} training failed: {e}"))
            }
        };
        for &method in &cfg.methods {
            let outcome = base.clone().and_then(|net| {
                run_cell(cfg, &net, regime, method, &train_set, &cal_set, &eval_set, &pipeline_cfg, part)
                    .map_err(|e| format!("{e:#}"))
            });
            if let Err(e) = &outcome {
                warn!("fold {fold}: cell {regime}/{method} failed: {e}");
            }
            cells.insert((regime, method), outcome);
        }
    }
    Ok(cells)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &RunConfig,
    base: &Net,
    regime: WeightRegime,
    method: CalibrationMethod,
    train_set: &[SubjectF64],
    cal_set: &[SubjectF64],
    eval_set: &[SubjectF64],
    pipeline_cfg: &PipelineConfig,
    part: &FoldPartition,
) -> anyhow::Result<CellFold> {
    info!("fold {}: {regime}/{method}", part.fold);
    let fold_data = FoldData {
        train: train_set,
        calibration: cal_set,
    };
    let model = calibrate_pipeline(method, base, regime, fold_data, pipeline_cfg)?;
    let (evaluation, probs) = evaluate_predictor(&model.predictor, eval_set, cfg.confidence_mode, cfg.bins)?;
    let scored: Vec<&str> = evaluation.dice.keys().map(String::as_str).collect();
    part.assert_hygiene(&scored)?;
    Ok(CellFold {
        soft: soft_counts(eval_set, &probs),
        evaluation,
        chosen_learning_rate: model.report.chosen_learning_rate,
    })
}

fn aggregate(cfg: &RunConfig, folds: &[FoldCells], regime: WeightRegime, method: CalibrationMethod) -> CellResult {
    let mut dice = BTreeMap::new();
    let mut ece_map = BTreeMap::new();
    let mut bins = ReliabilityBins::empty(cfg.bins);
    let (mut soft, mut total) = (0u64, 0u64);
    let mut lrs = Vec::new();
    let fail = |error: String| CellResult {
        regime,
        method,
        metrics: None,
        error: Some(error),
    };
    for (fold, cells) in folds.iter().enumerate() {
        let cell = match &cells[&(regime, method)] {
            Ok(c) => c,
            Err(e) => return fail(format!("fold {fold}: {e}")),
        };
        for (id, &d) in &cell.evaluation.dice {
            if dice.insert(id.clone(), d).is_some() {
                return fail(format!("subject {id} evaluated in more than one fold"));
            }
        }
        ece_map.extend(cell.evaluation.ece.per_subject_ece.clone());
        if let Err(e) = bins.merge(&cell.evaluation.ece.bins) {
            return fail(format!("fold {fold}: {e}"));
        }
        soft += cell.soft.0;
        total += cell.soft.1;
        lrs.push(cell.chosen_learning_rate);
    }
    let subject_ids: Vec<String> = dice.keys().cloned().collect();
    let dice: Vec<f64> = dice.into_values().collect();
    let ece_vec: Vec<f64> = subject_ids.iter().map(|id| ece_map[id]).collect();
    CellResult {
        regime,
        method,
        metrics: Some(CellMetrics {
            mean_dice: mean(&dice),
            mean_ece: mean(&ece_vec),
            pooled_ece: ece(&bins),
            soft_fraction: soft as f64 / total.max(1) as f64,
            subject_ids,
            dice,
            ece: ece_vec,
            best_dice: false,
            best_ece: false,
            p_dice: None,
            p_ece: None,
            chosen_learning_rates: lrs,
            bins,
        }),
        error: None,
    }
}

/// Marks, per regime, the best method and those not significantly different from it.
fn mark_best(table: &mut ResultsTable) -> anyhow::Result<()> {
    for &regime in &table.regimes.clone() {
        let idx: Vec<usize> = (0..table.cells.len())
            .filter(|&i| table.cells[i].regime == regime && table.cells[i].metrics.is_some())
            .collect();
        if idx.is_empty() {
            continue;
        }
        let ids = &table.cells[idx[0]].metrics.as_ref().unwrap().subject_ids;
        if idx.iter().any(|&i| &table.cells[i].metrics.as_ref().unwrap().subject_ids != ids) {
            bail!("{regime}: cells were evaluated on different subjects");
        }
        for (dir, is_dice) in [(Direction::Higher, true), (Direction::Lower, false)] {
            let methods: Vec<(String, Vec<f64>)> = idx
                .iter()
                .map(|&i| {
                    let c = &table.cells[i];
                    let m = c.metrics.as_ref().unwrap();
                    (c.method.name().to_string(), if is_dice { m.dice.clone() } else { m.ece.clone() })
                })
                .collect();
            let marking = best_marking(&methods, dir, table.alpha)?;
            for (&i, (name, p)) in idx.iter().zip(marking.p_values) {
                let marked = marking.marked.contains(&name);
                let m = table.cells[i].metrics.as_mut().unwrap();
                if is_dice {
                    m.best_dice = marked;
                    m.p_dice = p;
                } else {
                    m.best_ece = marked;
                    m.p_ece = p;
                }
            }
        }
    }
    Ok(())
}

/// Runs every (regime, method) cell on every fold and aggregates the held-out metrics.
///
/// A failing stage aborts only the cells that depend on it; their error is
/// recorded in the table.
pub fn run_experiment(cfg: &RunConfig, subjects: &[SubjectF64]) -> anyhow::Result<ResultsTable> {
    cfg.validate()?;
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let parts = fold_partitions(&ids, cfg.folds, cfg.seed, cfg.calibration_fraction)?;
    info!(
        "{} subjects, {} folds, {} regimes x {} methods",
        subjects.len(),
        cfg.folds,
        cfg.regimes.len(),
        cfg.methods.len()
    );
    let folds: Vec<FoldCells> = parts
        .par_iter()
        .map(|p| run_fold(cfg, subjects, p))
        .collect::<anyhow::Result<_>>()?;
    let mut table = ResultsTable {
        regimes: cfg.regimes.clone(),
        methods: cfg.methods.clone(),
        folds: cfg.folds,
        bins: cfg.bins,
        confidence_mode: cfg.confidence_mode,
        min_bin_count: cfg.min_bin_count,
        alpha: cfg.alpha,
        cells: Vec::new(),
    };
    for &regime in &cfg.regimes {
        for &method in &cfg.methods {
            table.cells.push(aggregate(cfg, &folds, regime, method));
        }
    }
    mark_best(&mut table)?;
    Ok(table)
}
