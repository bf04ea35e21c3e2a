//! Dense 2D grids and the elementwise maps every other module builds on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major 2D array of reals.
///
/// Used for images, logit maps, probability maps, binary masks and reference
/// posteriors alike. Metric code treats a grid as a flat voxel multiset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Real> Grid2D<T> {
    pub fn from_vec(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Grid of the given shape with every voxel set to `fill`.
    pub fn filled(height: usize, width: usize, fill: T) -> Result<Self> {
        Self::from_vec(height, width, vec![fill; height.saturating_mul(width)])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, T::zero())
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::from_vec(height, width, values)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: T) {
        self.values[row * self.width + col] = v;
    }

    pub fn ensure_same_shape(&self, other: &Grid2D<T>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination; shapes must match exactly.
    pub fn zip_map(&self, other: &Grid2D<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_probability(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    pub fn is_binary(&self) -> bool {
        self.values
            .iter()
            .all(|&v| v == T::zero() || v == T::one())
    }

    /// Number of voxels equal to one.
    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == T::one()).count()
    }

    pub fn cast<U: Real>(&self) -> Grid2D<U> {
        Grid2D {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.to_f64_lossy()).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

/// Grid of the given shape filled with `fill`.
pub fn make_grid<T: Real>(height: usize, width: usize, fill: T) -> Result<Grid2D<T>> {
    Grid2D::filled(height, width, fill)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Elementwise sigmoid of a logit map.
pub fn sigmoid_map<T: Real>(logits: &Grid2D<T>) -> Result<Grid2D<T>> {
    if !logits.all_finite() {
        return Err(Error::InputValidation(
            "logit map contains non-finite values".into(),
        ));
    }
    Ok(logits.map(sigmoid))
}

/// Hard class prediction: 1 where `p >= threshold`, otherwise 0.
pub fn predicted_class<T: Real>(probs: &Grid2D<T>, threshold: T) -> Result<Grid2D<T>> {
    if !(threshold >= T::zero() && threshold <= T::one()) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    ensure_probability(probs, "probability map")?;
    Ok(probs.map(|p| if p >= threshold { T::one() } else { T::zero() }))
}

/// Confidence of the hard prediction, `max(p, 1 - p)`.
pub fn prediction_confidence<T: Real>(probs: &Grid2D<T>) -> Result<Grid2D<T>> {
    ensure_probability(probs, "probability map")?;
    Ok(probs.map(|p| p.max(T::one() - p)))
}

/// 1 where the two binary grids agree.
pub fn agreement<T: Real>(pred: &Grid2D<T>, labels: &Grid2D<T>) -> Result<Grid2D<T>> {
    pred.zip_map(labels, |a, b| if a == b { T::one() } else { T::zero() })
}

pub(crate) fn ensure_probability<T: Real>(g: &Grid2D<T>, what: &str) -> Result<()> {
    if !g.is_probability() {
        return Err(Error::InputValidation(format!("{what} has values outside [0, 1]")));
    }
    Ok(())
}

pub(crate) fn ensure_binary<T: Real>(g: &Grid2D<T>, what: &str) -> Result<()> {
    if !g.is_binary() {
        return Err(Error::InputValidation(format!("{what} must be binary")));
    }
    Ok(())
}
