use serde::{Deserialize, Serialize};

use super::fit::{fit_loop, FitConfig, FitReport};
use crate::error::{Error, Result};
use crate::grid::{sigmoid, Grid2D};
use crate::loss::ce_loss_and_grad;
use crate::scalar::Real;
use crate::subject::Subject;

/// `sigmoid(a z + b)` on top of frozen logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlattParams<T> {
    pub a: T,
    pub b: T,
}

impl<T: Real> PlattParams<T> {
    pub fn identity() -> Self {
        Self {
            a: T::one(),
            b: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::NumericOverflow("non-finite Platt parameters".into()));
        }
        Ok(())
    }
}

impl<T: Real> Default for PlattParams<T> {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn apply_platt<T: Real>(params: &PlattParams<T>, logits: &Grid2D<T>) -> Grid2D<T> {
    logits.map(|z| sigmoid(params.a * z + params.b))
}

fn platt_loss_grad<T: Real>(p: &[T], s: &Subject<T>) -> Result<(T, Vec<T>)> {
    let z = s.cached_logits()?;
    let scaled = z.map(|v| p[0] * v + p[1]);
    let (loss, ds) = ce_loss_and_grad(&scaled, &s.labels, &s.eval_mask)?;
    let mut ga = T::zero();
    let mut gb = T::zero();
    for (&d, &v) in ds.values().iter().zip(z.values()) {
        ga += d * v;
        gb += d;
    }
    Ok((loss, vec![ga, gb]))
}

/// Fits `(a, b)` by masked cross-entropy starting from `(1, 0)`.
///
/// Subjects must carry cached logits. `stop` drives early stopping.
pub fn fit_platt<T: Real>(
    fit: &[&Subject<T>],
    stop: &[&Subject<T>],
    cfg: &FitConfig,
) -> Result<(PlattParams<T>, FitReport)> {
    let (p, report) = fit_loop(vec![T::one(), T::zero()], fit, stop, cfg, platt_loss_grad)?;
    let params = PlattParams { a: p[0], b: p[1] };
    params.validate()?;
    Ok((params, report))
}
