//! Held-out evaluation of probability maps: per-subject Dice and masked ECE.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::Predictor;
use crate::error::{Error, Result};
use crate::grid::{predicted_class, Grid2D};
use crate::metrics::{dice_score, ece_report, ConfidenceMode, EceReport, PredictionInput};
use crate::scalar::Real;
use crate::subject::Subject;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Dice of the 0.5-thresholded map inside the evaluation mask.
    pub dice: BTreeMap<String, f64>,
    pub ece: EceReport,
}

impl Evaluation {
    pub fn mean_dice(&self) -> f64 {
        self.dice.values().sum::<f64>() / self.dice.len().max(1) as f64
    }

    /// Mean of the per-subject ECEs.
    pub fn mean_ece(&self) -> f64 {
        self.ece.mean_subject_ece()
    }
}

pub fn evaluate_probabilities<T: Real>(
    subjects: &[Subject<T>],
    probs: &[Grid2D<T>],
    mode: ConfidenceMode,
    k: usize,
) -> Result<Evaluation> {
    if subjects.len() != probs.len() {
        return Err(Error::Internal(format!(
            "{} subjects but {} probability maps",
            subjects.len(),
            probs.len()
        )));
    }
    let mut dice = BTreeMap::new();
    for (s, p) in subjects.iter().zip(probs) {
        let hard = predicted_class(p, T::lit(0.5))?;
        let pred = hard.zip_map(&s.eval_mask, |a, m| a * m)?;
        let truth = s.labels.zip_map(&s.eval_mask, |a, m| a * m)?;
        if dice.insert(s.id.clone(), dice_score(&pred, &truth)?).is_some() {
            return Err(Error::Metric(format!("duplicate subject id {}", s.id)));
        }
    }
    let inputs: Vec<PredictionInput<'_, T>> = subjects
        .iter()
        .zip(probs)
        .map(|(s, p)| PredictionInput {
            id: &s.id,
            probs: p,
            labels: &s.labels,
            mask: &s.eval_mask,
        })
        .collect();
    Ok(Evaluation {
        dice,
        ece: ece_report(&inputs, mode, k)?,
    })
}

/// Runs `predictor` on every subject, then scores the maps.
pub fn evaluate_predictor<T: Real>(
    predictor: &Predictor<T>,
    subjects: &[Subject<T>],
    mode: ConfidenceMode,
    k: usize,
) -> Result<(Evaluation, Vec<Grid2D<T>>)> {
    let probs: Vec<Grid2D<T>> = subjects
        .par_iter()
        .map(|s| predictor.predict(s))
        .collect::<Result<_>>()?;
    Ok((evaluate_probabilities(subjects, &probs, mode, k)?, probs))
}
