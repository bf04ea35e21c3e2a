//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use segcal::calib::{CalibrationMethod, PipelineConfig};
use segcal::metrics::ConfidenceMode;
use segcal::synth::SynthConfig;
use segcal::train::{TrainConfig, WeightRegime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    /// `field` is the dotted key that failed validation.
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory of `.scv` subject files; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    /// Generate this many synthetic subjects in memory instead of reading `path`.
    pub subjects: Option<usize>,
    /// Generator settings for synthetic subjects; the seed is overridden by the run seed.
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub folds: usize,
    pub regimes: Vec<WeightRegime>,
    pub methods: Vec<CalibrationMethod>,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Share of each fold's training portion held out for calibration and early stopping.
    pub calibration_fraction: f64,
    pub bins: usize,
    pub confidence_mode: ConfidenceMode,
    /// Voxels a subject needs in a bin to enter the per-bin subject statistics.
    pub min_bin_count: u64,
    /// Significance level for best marking.
    pub alpha: f64,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            folds: 5,
            regimes: WeightRegime::ALL.to_vec(),
            methods: CalibrationMethod::ALL.to_vec(),
            seed: 0,
            output: None,
            calibration_fraction: 0.25,
            bins: segcal::metrics::DEFAULT_BINS,
            confidence_mode: ConfidenceMode::Prediction,
            min_bin_count: segcal::metrics::DEFAULT_MIN_BIN_COUNT,
            alpha: 0.05,
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        if let Some(p) = cfg.dataset.path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = cfg.output.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Generator settings for a synthetic run, seeded from the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.dataset.synth.clone().unwrap_or_default()
        }
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.dataset.path, self.dataset.subjects) {
            (None, None) => {
                return Err(invalid(
                    "dataset.path",
                    "missing; set dataset.path or dataset.subjects",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(invalid("dataset", "set either dataset.path or dataset.subjects, not both"))
            }
            (Some(p), None) => {
                if !p.is_dir() {
                    return Err(invalid("dataset.path", format!("{} is not a directory", p.display())));
                }
                if self.dataset.synth.is_some() {
                    return Err(invalid("dataset.synth", "only valid with dataset.subjects"));
                }
            }
            (None, Some(n)) => {
                if n == 0 {
                    return Err(invalid("dataset.subjects", "must be >= 1"));
                }
                self.synth_config()
                    .validate()
                    .map_err(|e| invalid("dataset.synth", e.to_string()))?;
            }
        }
        self.validate_settings()
    }

    /// Validates everything except the dataset section.
    pub fn validate_settings(&self) -> Result<(), ConfigError> {
        if self.folds < 2 {
            return Err(invalid("folds", format!("need at least 2, got {}", self.folds)));
        }
        if self.regimes.is_empty() {
            return Err(invalid("regimes", "at least one weight regime is required"));
        }
        if self.methods.is_empty() {
            return Err(invalid("methods", "at least one method is required"));
        }
        if has_duplicates(&self.regimes) {
            return Err(invalid("regimes", "duplicate entries"));
        }
        if has_duplicates(&self.methods) {
            return Err(invalid("methods", "duplicate entries"));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction < 1.0) {
            return Err(invalid("calibration_fraction", "must lie in (0, 1)"));
        }
        if self.bins == 0 {
            return Err(invalid("bins", "must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", "must lie in (0, 1)"));
        }
        self.pretrain
            .validate()
            .map_err(|e| invalid("pretrain", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        for &m in &self.methods {
            for &r in &self.regimes {
                self.pipeline
                    .check_method(m, r)
                    .map_err(|e| invalid("pipeline", e.to_string()))?;
            }
        }
        Ok(())
    }
}

fn has_duplicates<T: Ord + Clone>(v: &[T]) -> bool {
    let mut s = v.to_vec();
    s.sort();
    s.windows(2).any(|w| w[0] == w[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::from_toml(text, Path::new("/tmp/c.toml"))
    }

    #[test]
    fn minimal_synth_config_uses_defaults() {
        let c = parse("seed = 9\n[dataset]\nsubjects = 12\n[dataset.synth]\ngrid_size = 32\n").unwrap();
        c.validate().unwrap();
        assert_eq!(c.folds, 5);
        assert_eq!(c.methods.len(), 6);
        let s = c.synth_config();
        assert_eq!((c.dataset.subjects, s.grid_size, s.seed), (Some(12), 32, 9));
        assert_eq!(s.blur_sigma, SynthConfig::default().blur_sigma);
    }

    #[test]
    fn unknown_keys_fail() {
        assert!(matches!(parse("fold = 3\n"), Err(ConfigError::Parse { .. })));
        assert!(parse("[train]\nlearnig_rate = 1.0\n").is_err());
        assert!(parse("[dataset.synth]\nblur = 1.0\n").is_err());
    }

    #[test]
    fn missing_dataset_names_the_field() {
        let err = parse("folds = 3\n").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("dataset.path"), "{err}");
        let err = parse("[dataset]\npath = \"nope\"\n").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("dataset.path"), "{err}");
    }

    #[test]
    fn names_parse_and_round_trip() {
        let c = parse(
            "regimes = [\"SD\", \"CE_SD\"]\nmethods = [\"BASE\", \"MC_CENTER\"]\nconfidence_mode = \"class_one\"\n[dataset]\nsubjects = 4\n",
        )
        .unwrap();
        assert_eq!(c.regimes, vec![WeightRegime::Sd, WeightRegime::CeSd]);
        assert_eq!(c.methods, vec![CalibrationMethod::Base, CalibrationMethod::McCenter]);
        let back = parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_grids_are_rejected() {
        let err = parse("methods = []\n[dataset]\nsubjects = 4\n").unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("methods"));
    }
}
