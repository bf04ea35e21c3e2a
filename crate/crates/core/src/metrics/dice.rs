use crate::error::Result;
use crate::grid::{ensure_binary, Grid2D};
use crate::scalar::Real;

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_score<T: Real>(pred_mask: &Grid2D<T>, true_mask: &Grid2D<T>) -> Result<f64> {
    pred_mask.ensure_same_shape(true_mask)?;
    ensure_binary(pred_mask, "predicted mask")?;
    ensure_binary(true_mask, "true mask")?;
    let (mut a, mut b, mut both) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred_mask.values().iter().zip(true_mask.values()) {
        let (p, t) = (p == T::one(), t == T::one());
        a += p as u64;
        b += t as u64;
        both += (p && t) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}
