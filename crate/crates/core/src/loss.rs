//! Voxel-mean cross-entropy and soft Dice, both differentiated w.r.t. logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sigmoid, softplus, Grid2D};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    #[serde(alias = "CE")]
    CrossEntropy,
    #[serde(alias = "SD")]
    SoftDice,
}

/// Smoothing term of the soft Dice ratio.
pub const SOFT_DICE_EPSILON: f64 = 1.0;

pub fn loss_and_grad<T: Real>(
    kind: LossKind,
    logits: &Grid2D<T>,
    labels: &Grid2D<T>,
    mask: &Grid2D<T>,
) -> Result<(T, Grid2D<T>)> {
    match kind {
        LossKind::CrossEntropy => ce_loss_and_grad(logits, labels, mask),
        LossKind::SoftDice => softdice_loss_and_grad(logits, labels, mask, T::lit(SOFT_DICE_EPSILON)),
    }
}

fn check_inputs<T: Real>(logits: &Grid2D<T>, labels: &Grid2D<T>, mask: &Grid2D<T>) -> Result<usize> {
    logits.ensure_same_shape(labels)?;
    logits.ensure_same_shape(mask)?;
    let n = mask.values().iter().filter(|&&m| m != T::zero()).count();
    if n == 0 {
        return Err(Error::Metric("loss mask selects no voxel".into()));
    }
    Ok(n)
}

/// `-(1/N) sum_mask [y ln p + (1-y) ln(1-p)]` with `p = sigmoid(z)`.
///
/// Evaluated as `y softplus(-z) + (1-y) softplus(z)`, which never takes the
/// log of a rounded probability.
pub fn ce_loss_and_grad<T: Real>(
    logits: &Grid2D<T>,
    labels: &Grid2D<T>,
    mask: &Grid2D<T>,
) -> Result<(T, Grid2D<T>)> {
    let n = check_inputs(logits, labels, mask)?;
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut grad = logits.map(|_| T::zero());
    let mut total = T::zero();
    for (((&z, &y), &m), g) in logits
        .values()
        .iter()
        .zip(labels.values())
        .zip(mask.values())
        .zip(grad.values_mut())
    {
        if m == T::zero() {
            continue;
        }
        total += y * softplus(-z) + (T::one() - y) * softplus(z);
        *g = (sigmoid(z) - y) * inv_n;
    }
    Ok((total * inv_n, grad))
}

/// `1 - (2I + eps) / (S_p + S_y + eps)` over masked voxels.
pub fn softdice_loss_and_grad<T: Real>(
    logits: &Grid2D<T>,
    labels: &Grid2D<T>,
    mask: &Grid2D<T>,
    epsilon: T,
) -> Result<(T, Grid2D<T>)> {
    check_inputs(logits, labels, mask)?;
    let two = T::lit(2.0);
    let probs = logits.map(sigmoid);
    let (mut sp, mut sy, mut inter) = (T::zero(), T::zero(), T::zero());
    for ((&p, &y), &m) in probs.values().iter().zip(labels.values()).zip(mask.values()) {
        if m != T::zero() {
            sp += p;
            sy += y;
            inter += p * y;
        }
    }
    let num = two * inter + epsilon;
    let den = sp + sy + epsilon;
    let loss = T::one() - num / den;
    // dL/dp_v = -(2 y_v den - num) / den^2 ; dp/dz = p (1 - p)
    let den2 = den * den;
    let mut grad = logits.map(|_| T::zero());
    for (((&p, &y), &m), g) in probs
        .values()
        .iter()
        .zip(labels.values())
        .zip(mask.values())
        .zip(grad.values_mut())
    {
        if m != T::zero() {
            let dldp = -(two * y * den - num) / den2;
            *g = dldp * p * (T::one() - p);
        }
    }
    Ok((loss, grad))
}
