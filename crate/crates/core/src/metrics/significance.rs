//! "Best, or not significantly different from the best" marking.

use serde::{Deserialize, Serialize};

use super::wilcoxon::wilcoxon_signed_rank;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Higher,
    Lower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMarking {
    pub best: String,
    /// Marked methods in input order (always includes `best`).
    pub marked: Vec<String>,
    /// Paired p-value against the best; `None` for the best itself or when
    /// every difference is zero.
    pub p_values: Vec<(String, Option<f64>)>,
}

/// Marks the best-mean method plus every method whose paired Wilcoxon test
/// against it gives `p >= alpha`. Identical vectors count as tied with the best.
pub fn best_marking(
    methods: &[(String, Vec<f64>)],
    direction: Direction,
    alpha: f64,
) -> Result<BestMarking> {
    if methods.is_empty() {
        return Err(Error::Parameter("no methods to compare".into()));
    }
    let n = methods[0].1.len();
    if n == 0 || methods.iter().any(|(_, v)| v.len() != n) {
        return Err(Error::Parameter("methods must have equal, nonzero subject counts".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut best = 0;
    for (i, (_, v)) in methods.iter().enumerate().skip(1) {
        let (m, b) = (mean(v), mean(&methods[best].1));
        let better = match direction {
            Direction::Higher => m > b,
            Direction::Lower => m < b,
        };
        if better {
            best = i;
        }
    }
    let mut marked = Vec::new();
    let mut p_values = Vec::new();
    for (i, (name, v)) in methods.iter().enumerate() {
        if i == best {
            marked.push(name.clone());
            p_values.push((name.clone(), None));
            continue;
        }
        match wilcoxon_signed_rank(&methods[best].1, v) {
            Ok(r) => {
                if r.p_value >= alpha {
                    marked.push(name.clone());
                }
                p_values.push((name.clone(), Some(r.p_value)));
            }
            Err(Error::Degenerate(_)) => {
                marked.push(name.clone());
                p_values.push((name.clone(), None));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(BestMarking {
        best: methods[best].0.clone(),
        marked,
        p_values,
    })
}
