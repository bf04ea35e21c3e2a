//! Subject-level accuracy distributions per reliability bin.

use serde::{Deserialize, Serialize};

use super::bins::ReliabilityBins;

pub const DEFAULT_MIN_BIN_COUNT: u64 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectAccuracy {
    pub id: String,
    pub accuracy: f64,
    pub count: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinDistribution {
    pub bin: usize,
    pub low: f64,
    pub high: f64,
    pub subjects: Vec<SubjectAccuracy>,
    /// `None` when no subject qualifies.
    pub summary: Option<BinSummary>,
}

/// Linear-interpolation quantile of sorted data (`h = (n-1) q`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(values: &[f64]) -> Option<BinSummary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(BinSummary {
        mean,
        std: var.sqrt(),
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
    })
}

/// For each bin, accuracies of subjects with at least `min_bin_count` voxels in it.
pub fn subject_bin_distribution(bins: &ReliabilityBins, min_bin_count: u64) -> Vec<BinDistribution> {
    (0..bins.k)
        .map(|b| {
            let subjects: Vec<SubjectAccuracy> = bins
                .subjects
                .iter()
                .filter(|t| t.counts[b] >= min_bin_count.max(1))
                .map(|t| SubjectAccuracy {
                    id: t.id.clone(),
                    accuracy: t.accuracy(b).expect("count >= 1"),
                    count: t.counts[b],
                })
                .collect();
            let accs: Vec<f64> = subjects.iter().map(|s| s.accuracy).collect();
            let (low, high) = bins.edges(b);
            BinDistribution {
                bin: b,
                low,
                high,
                summary: summarize(&accs),
                subjects,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::bins::SubjectTally;

    fn tally(id: &str, k: usize, bin: usize, n: u64, ok: u64) -> SubjectTally {
        let mut t = SubjectTally {
            id: id.into(),
            counts: vec![0; k],
            correct: vec![0; k],
            conf_sums: vec![0.0; k],
        };
        t.counts[bin] = n;
        t.correct[bin] = ok;
        t
    }

    fn bins_of(tallies: Vec<SubjectTally>, k: usize) -> ReliabilityBins {
        let mut b = ReliabilityBins::empty(k);
        let mut other = ReliabilityBins::empty(k);
        other.subjects = tallies;
        b.merge(&other).unwrap();
        b
    }

    #[test]
    fn two_point_statistics() {
        let b = bins_of(vec![tally("a", 4, 2, 10, 4), tally("b", 4, 2, 20, 16)], 4);
        let d = subject_bin_distribution(&b, 10);
        let s = d[2].summary.unwrap();
        assert!((s.mean - 0.6).abs() < 1e-15);
        assert!((s.std - 0.2).abs() < 1e-15);
        assert!((s.median - 0.6).abs() < 1e-15);
        assert!(d[0].summary.is_none());
    }

    #[test]
    fn single_subject_zero_std_and_threshold() {
        let b = bins_of(vec![tally("a", 4, 1, 12, 5), tally("b", 4, 1, 9, 9)], 4);
        let d = subject_bin_distribution(&b, 10);
        assert_eq!(d[1].subjects.len(), 1);
        assert_eq!(d[1].summary.unwrap().std, 0.0);
    }

    #[test]
    fn linear_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.75), 3.25);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
    }
}
