//! Wilcoxon signed-rank test for paired per-subject values.
//!
//! The exact null distribution of `W+` is obtained by counting sign patterns
//! with a subset-sum recursion over doubled average ranks, which stays exact
//! in the presence of tied magnitudes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest effective sample size handled by exact counting in `Auto` mode.
pub const EXACT_MAX_N: usize = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    /// Two-sided.
    pub p_value: f64,
    pub n_effective: usize,
    pub method: WilcoxonMethod,
}

struct Ranked {
    /// Doubled average ranks (integers).
    ranks2: Vec<u64>,
    positive: Vec<bool>,
    /// Sizes of tie groups among |d|.
    ties: Vec<usize>,
}

fn rank_differences(a: &[f64], b: &[f64]) -> Result<Ranked> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = Vec::with_capacity(a.len());
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        if !d.is_finite() {
            return Err(Error::InputValidation("non-finite paired difference".into()));
        }
        if d != 0.0 {
            diffs.push(d);
        }
    }
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = diffs.len();
    let mut ranks2 = vec![0u64; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        // Average of ranks i+1..=j+1, doubled.
        let r2 = (i + 1 + j + 1) as u64;
        ranks2[i..=j].iter_mut().for_each(|r| *r = r2);
        ties.push(j - i + 1);
        i = j + 1;
    }
    Ok(Ranked {
        ranks2,
        positive: diffs.iter().map(|&d| d > 0.0).collect(),
        ties,
    })
}

/// Test with automatic method choice: exact for `n_effective <= 25`.
pub fn wilcoxon_signed_rank(values_a: &[f64], values_b: &[f64]) -> Result<WilcoxonResult> {
    let n = values_a
        .iter()
        .zip(values_b)
        .filter(|(a, b)| *a - *b != 0.0)
        .count();
    let method = if n <= EXACT_MAX_N {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    };
    wilcoxon_signed_rank_with(values_a, values_b, method)
}

pub fn wilcoxon_signed_rank_with(
    values_a: &[f64],
    values_b: &[f64],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    let r = rank_differences(values_a, values_b)?;
    let n = r.ranks2.len();
    let total2: u64 = r.ranks2.iter().sum();
    let w_plus2: u64 = r
        .ranks2
        .iter()
        .zip(&r.positive)
        .filter(|(_, &p)| p)
        .map(|(&x, _)| x)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total2 - w_plus2) as f64 / 2.0;
    let p_value = match method {
        WilcoxonMethod::Exact => exact_p(&r.ranks2, w_plus2),
        WilcoxonMethod::NormalApprox => normal_p(n, w_plus, &r.ties),
    };
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        p_value,
        n_effective: n,
        method,
    })
}

/// `P(|W+ - mu| >= |w - mu|)` under the null, with every sign pattern equally likely.
fn exact_p(ranks2: &[u64], w_plus2: u64) -> f64 {
    let total2: u64 = ranks2.iter().sum();
    let mut counts = vec![0f64; total2 as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks2 {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    // Doubled mean is total2 / 2; compare with everything doubled again to stay integral.
    let dev = |s: u64| (2 * s).abs_diff(total2);
    let observed = dev(w_plus2);
    let extreme: f64 = counts
        .iter()
        .enumerate()
        .filter(|(s, _)| dev(*s as u64) >= observed)
        .map(|(_, &c)| c)
        .sum();
    let patterns = 2f64.powi(ranks2.len() as i32);
    (extreme / patterns).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(n: usize, w_plus: f64, ties: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = libm::erfc(z / std::f64::consts::SQRT_2);
    p.clamp(f64::MIN_POSITIVE, 1.0)
}
