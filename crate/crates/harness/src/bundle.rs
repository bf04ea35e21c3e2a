//! Model directories written by `train` and `calibrate`.
//!
//! A directory holds `model.json` (regime, method, fold partition and MC
//! settings), `net.scw` and, for Platt or aux-conv, `calibrator.scw`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use segcal::calib::{CalibrationMethod, Calibrator, Predictor};
use segcal::net::DropoutConfig;
use segcal::train::WeightRegime;
use segcal::PredictorF64;
use serde::{Deserialize, Serialize};

use crate::experiment::FoldPartition;
use crate::format::{load_aux_conv, load_net, load_platt, load_checkpoint, save_checkpoint, Checkpoint};

pub const MANIFEST_FILE: &str = "model.json";
pub const NET_FILE: &str = "net.scw";
pub const CALIBRATOR_FILE: &str = "calibrator.scw";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub dropout: DropoutConfig,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub regime: WeightRegime,
    pub method: CalibrationMethod,
    /// Run seed the fold settings were derived from.
    pub seed: u64,
    pub partition: FoldPartition,
    pub mc: Option<McSettings>,
}

pub fn save_bundle(dir: &Path, manifest: &Manifest, predictor: &PredictorF64) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut manifest = manifest.clone();
    let calibrator = dir.join(CALIBRATOR_FILE);
    if calibrator.exists() {
        fs::remove_file(&calibrator).with_context(|| format!("cannot replace {}", calibrator.display()))?;
    }
    match predictor {
        Predictor::Deterministic { net, calibrator: c } => {
            save_checkpoint(&dir.join(NET_FILE), &Checkpoint::Net(net.clone()))?;
            match c {
                Calibrator::Identity => {}
                Calibrator::Platt(p) => save_checkpoint(&calibrator, &Checkpoint::Platt(*p))?,
                Calibrator::AuxConv(p) => save_checkpoint(&calibrator, &Checkpoint::AuxConv(p.clone()))?,
            }
            manifest.mc = None;
        }
        Predictor::MonteCarlo {
            net,
            n_samples,
            dropout,
            seed,
        } => {
            save_checkpoint(&dir.join(NET_FILE), &Checkpoint::Net(net.clone()))?;
            manifest.mc = Some(McSettings {
                dropout: dropout.clone(),
                n_samples: *n_samples,
                seed: *seed,
            });
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_bundle(dir: &Path) -> anyhow::Result<(Manifest, PredictorF64)> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
    let manifest: Manifest =
        serde_json::from_str(&text).with_context(|| format!("{} is not a model manifest", path.display()))?;
    let net = load_net(&dir.join(NET_FILE))?;
    let calibrator_path = dir.join(CALIBRATOR_FILE);
    let predictor = match (&manifest.mc, manifest.method) {
        (Some(mc), _) => Predictor::MonteCarlo {
            net,
            n_samples: mc.n_samples,
            dropout: mc.dropout.clone(),
            seed: mc.seed,
        },
        (None, CalibrationMethod::Platt) => Predictor::Deterministic {
            net,
            calibrator: Calibrator::Platt(load_platt(&calibrator_path)?),
        },
        (None, CalibrationMethod::Aux) => Predictor::Deterministic {
            net,
            calibrator: Calibrator::AuxConv(load_aux_conv(&calibrator_path)?),
        },
        (None, CalibrationMethod::Base | CalibrationMethod::Finetune) => {
            if calibrator_path.exists() {
                bail!(
                    "{}: unexpected calibrator ({:?}) for method {}",
                    dir.display(),
                    load_checkpoint(&calibrator_path)?.kind(),
                    manifest.method
                );
            }
            Predictor::base(net)
        }
        (None, m) => bail!("{}: method {m} needs MC settings", path.display()),
    };
    Ok((manifest, predictor))
}
