use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_binary, ensure_probability, Grid2D};
use crate::scalar::Real;

pub const DEFAULT_BINS: usize = 20;

/// Which quantity is binned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// `max(p, 1 - p)` against correctness of the thresholded prediction.
    #[default]
    Prediction,
    /// Raw `p` against the frequency of class 1.
    ClassOne,
}

/// Per-subject tallies, aligned with the global bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectTally {
    pub id: String,
    pub counts: Vec<u64>,
    pub correct: Vec<u64>,
    pub conf_sums: Vec<f64>,
}

impl SubjectTally {
    fn empty(id: &str, k: usize) -> Self {
        Self {
            id: id.to_owned(),
            counts: vec![0; k],
            correct: vec![0; k],
            conf_sums: vec![0.0; k],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accuracy in bin `b`, `None` when the bin is empty for this subject.
    pub fn accuracy(&self, b: usize) -> Option<f64> {
        (self.counts[b] > 0).then(|| self.correct[b] as f64 / self.counts[b] as f64)
    }

    /// ECE with this subject's voxels binned on their own.
    pub fn ece(&self) -> f64 {
        gap_sum(&self.correct, &self.conf_sums) / self.total() as f64
    }
}

/// Equal-width bins over `[0, 1]`; the last bin is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub k: usize,
    pub counts: Vec<u64>,
    pub correct: Vec<u64>,
    pub conf_sums: Vec<f64>,
    pub subjects: Vec<SubjectTally>,
}

impl ReliabilityBins {
    pub fn empty(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k],
            correct: vec![0; k],
            conf_sums: vec![0.0; k],
            subjects: Vec::new(),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    #[inline]
    pub fn bin_of(&self, confidence: f64) -> usize {
        bin_index(confidence, self.k)
    }

    pub fn edges(&self, b: usize) -> (f64, f64) {
        (b as f64 / self.k as f64, (b + 1) as f64 / self.k as f64)
    }

    pub fn mean_confidence(&self, b: usize) -> Option<f64> {
        (self.counts[b] > 0).then(|| self.conf_sums[b] / self.counts[b] as f64)
    }

    pub fn accuracy(&self, b: usize) -> Option<f64> {
        (self.counts[b] > 0).then(|| self.correct[b] as f64 / self.counts[b] as f64)
    }

    /// Adds another set of tallies (disjoint subjects) into this one.
    pub fn merge(&mut self, other: &ReliabilityBins) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Metric(format!(
                "cannot merge {} bins into {}",
                other.k, self.k
            )));
        }
        for t in &other.subjects {
            self.push_subject(t.clone());
        }
        Ok(())
    }

    fn push_subject(&mut self, t: SubjectTally) {
        for b in 0..self.k {
            self.counts[b] += t.counts[b];
            self.correct[b] += t.correct[b];
            self.conf_sums[b] += t.conf_sums[b];
        }
        self.subjects.push(t);
    }
}

#[inline]
fn bin_index(confidence: f64, k: usize) -> usize {
    ((confidence * k as f64).floor() as usize).min(k - 1)
}

fn gap_sum(correct: &[u64], conf_sums: &[f64]) -> f64 {
    // |B|·|acc - conf| = |correct - conf_sum|
    correct
        .iter()
        .zip(conf_sums)
        .map(|(&c, &s)| (c as f64 - s).abs())
        .sum()
}

/// One subject's binning inputs.
#[derive(Clone, Copy, Debug)]
pub struct BinInput<'a, T> {
    pub id: &'a str,
    pub confidence: &'a Grid2D<T>,
    pub correctness: &'a Grid2D<T>,
    pub mask: &'a Grid2D<T>,
}

/// Bins every masked voxel at `floor(confidence * k)`; confidence 1.0 goes to bin `k-1`.
pub fn reliability_bins<T: Real>(inputs: &[BinInput<'_, T>], k: usize) -> Result<ReliabilityBins> {
    if k == 0 {
        return Err(Error::Parameter("bin count must be >= 1".into()));
    }
    let mut bins = ReliabilityBins::empty(k);
    for input in inputs {
        input.confidence.ensure_same_shape(input.correctness)?;
        input.confidence.ensure_same_shape(input.mask)?;
        ensure_probability(input.confidence, "confidence")?;
        ensure_binary(input.correctness, "correctness")?;
        ensure_binary(input.mask, "mask")?;
        let mut tally = SubjectTally::empty(input.id, k);
        for ((&c, &ok), &m) in input
            .confidence
            .values()
            .iter()
            .zip(input.correctness.values())
            .zip(input.mask.values())
        {
            if m == T::zero() {
                continue;
            }
            let c = c.to_f64_lossy();
            let b = bin_index(c, k);
            tally.counts[b] += 1;
            tally.conf_sums[b] += c;
            if ok == T::one() {
                tally.correct[b] += 1;
            }
        }
        bins.push_subject(tally);
    }
    if bins.total() == 0 {
        return Err(Error::Metric("no masked voxel to bin".into()));
    }
    Ok(bins)
}

/// A probability map with its labels and evaluation mask.
#[derive(Clone, Copy, Debug)]
pub struct PredictionInput<'a, T> {
    pub id: &'a str,
    pub probs: &'a Grid2D<T>,
    pub labels: &'a Grid2D<T>,
    pub mask: &'a Grid2D<T>,
}

/// Derives (confidence, correctness) from class-1 probabilities per `mode`.
///
/// Prediction mode thresholds at 0.5 (ties to class 1).
pub fn bins_from_probabilities<T: Real>(
    inputs: &[PredictionInput<'_, T>],
    mode: ConfidenceMode,
    k: usize,
) -> Result<ReliabilityBins> {
    let half = T::lit(0.5);
    let mut derived = Vec::with_capacity(inputs.len());
    for p in inputs {
        ensure_probability(p.probs, "probability map")?;
        p.probs.ensure_same_shape(p.labels)?;
        let pair = match mode {
            ConfidenceMode::Prediction => {
                let conf = p.probs.map(|v| v.max(T::one() - v));
                let correct = p.probs.zip_map(p.labels, |v, y| {
                    let pred = if v >= half { T::one() } else { T::zero() };
                    if pred == y {
                        T::one()
                    } else {
                        T::zero()
                    }
                })?;
                (conf, correct)
            }
            ConfidenceMode::ClassOne => (p.probs.clone(), p.labels.clone()),
        };
        derived.push(pair);
    }
    let bin_inputs: Vec<BinInput<'_, T>> = inputs
        .iter()
        .zip(&derived)
        .map(|(p, (c, ok))| BinInput {
            id: p.id,
            confidence: c,
            correctness: ok,
            mask: p.mask,
        })
        .collect();
    reliability_bins(&bin_inputs, k)
}

/// `sum_k |B_k|/N · |acc(B_k) - conf(B_k)|`; empty bins contribute nothing.
pub fn ece(bins: &ReliabilityBins) -> f64 {
    let n = bins.total();
    if n == 0 {
        return 0.0;
    }
    gap_sum(&bins.correct, &bins.conf_sums) / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub mode: ConfidenceMode,
    pub k: usize,
    /// ECE over the pooled voxels of all subjects.
    pub ece: f64,
    pub bins: ReliabilityBins,
    /// Each subject binned separately.
    pub per_subject_ece: BTreeMap<String, f64>,
}

impl EceReport {
    pub fn mean_subject_ece(&self) -> f64 {
        let n = self.per_subject_ece.len().max(1) as f64;
        self.bins.subjects.iter().map(|t| t.ece()).sum::<f64>() / n
    }
}

pub fn ece_report<T: Real>(
    inputs: &[PredictionInput<'_, T>],
    mode: ConfidenceMode,
    k: usize,
) -> Result<EceReport> {
    let bins = bins_from_probabilities(inputs, mode, k)?;
    let mut per_subject_ece = BTreeMap::new();
    for t in &bins.subjects {
        if t.total() == 0 {
            return Err(Error::Metric(format!("subject {} has no masked voxel", t.id)));
        }
        if per_subject_ece.insert(t.id.clone(), t.ece()).is_some() {
            return Err(Error::Metric(format!("duplicate subject id {}", t.id)));
        }
    }
    Ok(EceReport {
        mode,
        k,
        ece: ece(&bins),
        bins,
        per_subject_ece,
    })
}
