//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config or input
//! files), 2 runtime failure. Progress goes to stderr; tables and evaluation
//! summaries go to stdout.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use segcal::calib::{calibrate_pipeline, CalibrationMethod, FoldData, Predictor};
use segcal::eval::evaluate_probabilities;
use segcal::metrics::wilcoxon_signed_rank;
use segcal::synth::render_dataset;
use segcal::train::WeightRegime;
use segcal::{Grid, SubjectF64};

use crate::bundle::{load_bundle, save_bundle, Manifest};
use crate::config::{ConfigError, RunConfig};
use crate::experiment::{fold_partitions, load_subjects, run_experiment, select, FoldSettings};
use crate::format::{load_dataset, save_dataset, FormatError, StoredSubject};
use crate::report::{read_results_json, render_table, write_reports};

pub const THREADS_ENV: &str = "SEG_CALIB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "segcal", version, about = "Calibration experiments for binary segmentation")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into --out.
    SynthGen {
        #[arg(long)]
        subjects: usize,
        /// Voxels per side; defaults to the config or generator default.
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Train base weights for one regime on one fold.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        regime: WeightRegime,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Fit one calibration method on top of a trained model.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        method: CalibrationMethod,
    },
    /// Write probability maps for a model's evaluation subjects.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Override the number of MC samples of an MC model.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Predict every subject in --data instead of the held-out fold.
        #[arg(long)]
        all: bool,
    },
    /// Score one or two prediction directories; two also get a paired Wilcoxon test.
    Evaluate {
        #[arg(required = true, num_args = 1..=2)]
        predictions: Vec<PathBuf>,
    },
    /// Run the full cross-validated grid from --config.
    Run,
    /// Re-emit tables and CSVs from a results file.
    Report {
        #[arg(long)]
        results: PathBuf,
    },
}

/// Bad user input: reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for validation errors anywhere in the chain, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            return if matches!(f, FormatError::Io { .. }) { 2 } else { 1 };
        }
        if let Some(segcal::Error::Configuration(_)) = cause.downcast_ref::<segcal::Error>() {
            return 1;
        }
    }
    2
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let pool = thread_pool(cli.global.threads)?;
    pool.install(|| dispatch(&cli))
}

fn thread_pool(threads: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        b = b.num_threads(n);
    }
    b.build().context("cannot start worker threads")
}

fn load_config(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn out_dir(g: &GlobalArgs) -> anyhow::Result<&Path> {
    g.out.as_deref().ok_or_else(|| usage("--out is required"))
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::SynthGen { subjects, grid_size } => {
            let cfg = load_config(g)?;
            if *subjects == 0 {
                return Err(usage("--subjects must be >= 1"));
            }
            let mut synth = cfg.synth_config();
            if let Some(n) = grid_size {
                synth.grid_size = *n;
            }
            synth.validate().map_err(|e| usage(e.to_string()))?;
            let dir = out_dir(g)?;
            info!("generating {subjects} subjects into {}", dir.display());
            let stored: Vec<StoredSubject> = render_dataset(&synth, *subjects)?.into_iter().map(Into::into).collect();
            save_dataset(dir, &stored)?;
            Ok(())
        }
        Command::Train { data, regime, fold } => {
            let cfg = settings(g)?;
            let subjects = read_subjects(data)?;
            let part = partition(&cfg, &subjects, *fold)?;
            let fs = FoldSettings::new(&cfg, *fold);
            info!("training {regime} on fold {fold} ({} subjects)", part.train.len());
            let net = fs.train_base(*regime, &select(&subjects, &part.train)?, &select(&subjects, &part.calibration)?)?;
            let manifest = Manifest {
                regime: *regime,
                method: CalibrationMethod::Base,
                seed: cfg.seed,
                partition: part,
                mc: None,
            };
            save_bundle(out_dir(g)?, &manifest, &Predictor::base(net))
        }
        Command::Calibrate { data, model, method } => {
            let (manifest, predictor) = load_bundle(model)?;
            if manifest.method != CalibrationMethod::Base {
                return Err(usage(format!(
                    "{} holds a {} model; calibrate starts from a trained base model",
                    model.display(),
                    manifest.method
                )));
            }
            let mut cfg = settings(g)?;
            if g.seed.is_none() {
                cfg.seed = manifest.seed;
            }
            let subjects = read_subjects(data)?;
            let part = &manifest.partition;
            let fs = FoldSettings::new(&cfg, part.fold);
            let train_set = select(&subjects, &part.train)?;
            let cal_set = select(&subjects, &part.calibration)?;
            info!("fitting {method} on {} calibration subjects", cal_set.len());
            let fitted = calibrate_pipeline(
                *method,
                predictor.net(),
                manifest.regime,
                FoldData {
                    train: &train_set,
                    calibration: &cal_set,
                },
                &fs.pipeline,
            )?;
            if let Some(lr) = fitted.report.chosen_learning_rate {
                info!("{method}: chose retraining learning rate {lr:e}");
            }
            let manifest = Manifest {
                method: *method,
                seed: cfg.seed,
                ..manifest
            };
            save_bundle(out_dir(g)?, &manifest, &fitted.predictor)
        }
        Command::Predict {
            data,
            model,
            mc_samples,
            all,
        } => {
            let (manifest, mut predictor) = load_bundle(model)?;
            if let Some(t) = mc_samples {
                match &mut predictor {
                    Predictor::MonteCarlo { n_samples, .. } if *t > 0 => *n_samples = *t,
                    Predictor::MonteCarlo { .. } => return Err(usage("--mc-samples must be >= 1")),
                    Predictor::Deterministic { .. } => {
                        return Err(usage(format!("--mc-samples given but {} is not an MC model", manifest.method)))
                    }
                }
            }
            let subjects = read_subjects(data)?;
            let targets = if *all {
                subjects
            } else {
                select(&subjects, &manifest.partition.evaluation)?
            };
            let dir = out_dir(g)?;
            info!("predicting {} subjects with {}", targets.len(), manifest.method);
            let stored = predict_all(&predictor, targets)?;
            save_dataset(dir, &stored)?;
            Ok(())
        }
        Command::Evaluate { predictions } => {
            let cfg = settings(g)?;
            let mut rows = Vec::new();
            for dir in predictions {
                let (subjects, probs) = read_predictions(dir)?;
                let ev = evaluate_probabilities(&subjects, &probs, cfg.confidence_mode, cfg.bins)?;
                rows.push((dir.display().to_string(), ev));
            }
            println!("predictions\tmean_dice\tmean_ece");
            for (name, ev) in &rows {
                println!("{name}\t{}\t{}", ev.mean_dice(), ev.mean_ece());
            }
            if let [(_, a), (_, b)] = rows.as_slice() {
                if a.dice.keys().ne(b.dice.keys()) {
                    return Err(usage("the two prediction sets cover different subjects"));
                }
                let ece = |e: &segcal::eval::Evaluation| e.ece.per_subject_ece.values().copied().collect::<Vec<_>>();
                let dice = |e: &segcal::eval::Evaluation| e.dice.values().copied().collect::<Vec<_>>();
                let p = |x: Vec<f64>, y: Vec<f64>| match wilcoxon_signed_rank(&x, &y) {
                    Ok(r) => r.p_value.to_string(),
                    Err(_) => "NA".to_string(),
                };
                println!("wilcoxon_p_dice\t{}", p(dice(a), dice(b)));
                println!("wilcoxon_p_ece\t{}", p(ece(a), ece(b)));
            }
            Ok(())
        }
        Command::Run => {
            if g.config.is_none() {
                return Err(usage("run needs --config"));
            }
            let cfg = load_config(g)?;
            cfg.validate()?;
            let dir = cfg
                .output
                .clone()
                .ok_or_else(|| usage("set `output` in the config or pass --out"))?;
            let subjects = load_subjects(&cfg)?;
            let table = run_experiment(&cfg, &subjects)?;
            write_reports(&dir, &table)?;
            info!("wrote reports to {}", dir.display());
            print!("{}", render_table(&table));
            Ok(())
        }
        Command::Report { results } => {
            let table = read_results_json(results).map_err(|e| usage(format!("{e:#}")))?;
            let dir = match &g.out {
                Some(d) => d.clone(),
                None => results.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            info!("writing reports to {}", dir.display());
            write_reports(&dir, &table)?;
            print!("{}", render_table(&table));
            Ok(())
        }
    }
}

/// Config for single-stage commands: the dataset section is not needed.
fn settings(g: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let cfg = load_config(g)?;
    cfg.validate_settings()?;
    Ok(cfg)
}

fn read_subjects(dir: &Path) -> anyhow::Result<Vec<SubjectF64>> {
    if !dir.is_dir() {
        return Err(usage(format!("--data: {} is not a directory", dir.display())));
    }
    Ok(load_dataset(dir)?.into_iter().map(|s| s.subject).collect())
}

fn partition(cfg: &RunConfig, subjects: &[SubjectF64], fold: usize) -> anyhow::Result<crate::experiment::FoldPartition> {
    if fold >= cfg.folds {
        return Err(usage(format!("--fold {fold} out of range for {} folds", cfg.folds)));
    }
    let ids: Vec<String> = subjects.iter().map(|s| s.id.clone()).collect();
    let mut parts = fold_partitions(&ids, cfg.folds, cfg.seed, cfg.calibration_fraction)
        .map_err(|e| usage(format!("{e:#}")))?;
    Ok(parts.swap_remove(fold))
}

fn predict_all(predictor: &segcal::PredictorF64, subjects: Vec<SubjectF64>) -> anyhow::Result<Vec<StoredSubject>> {
    use rayon::prelude::*;
    subjects
        .into_par_iter()
        .map(|s| {
            let p = predictor.predict(&s)?;
            Ok(StoredSubject {
                subject: s,
                probability: Some(p),
            })
        })
        .collect()
}

fn read_predictions(dir: &Path) -> anyhow::Result<(Vec<SubjectF64>, Vec<Grid>)> {
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let mut subjects = Vec::new();
    let mut probs = Vec::new();
    for s in load_dataset(dir)? {
        let Some(p) = s.probability else {
            bail!(UsageError(format!(
                "{}: subject {} has no probability map; run `predict` first",
                dir.display(),
                s.subject.id
            )));
        };
        subjects.push(s.subject);
        probs.push(p);
    }
    Ok((subjects, probs))
}
