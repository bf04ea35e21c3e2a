use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{sigmoid, Grid2D};
use crate::net::{forward, forward_from, prefix_activation, DropoutConfig, NetParams};
use crate::scalar::Real;
use crate::train::derived_rng;

pub const DEFAULT_MC_SAMPLES: usize = 20;

/// Samples evaluated in parallel before they are folded into the running sums.
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_samples: usize,
    pub dropout: DropoutConfig,
    pub seed: u64,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Parameter("MC sampling needs at least one sample".into()));
        }
        self.dropout.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McPrediction<T> {
    pub mean: Grid2D<T>,
    /// Population standard deviation over samples (divides by T).
    pub std: Grid2D<T>,
}

/// Averages `n_samples` sigmoid outputs with dropout active at inference.
///
/// Sample `t` draws its masks from a stream derived from `(seed, t)`, and the
/// sums are accumulated in sample order, so the output is independent of the
/// thread count. With rate 0 every sample equals the deterministic forward pass.
pub fn mc_predict<T: Real>(params: &NetParams<T>, image: &Grid2D<T>, cfg: &McConfig) -> Result<McPrediction<T>> {
    cfg.validate()?;
    let (h, w) = image.shape();
    let n = h * w;
    let Some(start) = cfg.dropout.first_site_layer() else {
        let (z, _) = forward::<T, ChaCha8Rng>(params, image, &DropoutConfig::none(), None)?;
        return Ok(McPrediction {
            mean: z.map(sigmoid),
            std: Grid2D::zeros(h, w)?,
        });
    };
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("network input must be at least 3x3, got {h}x{w}")));
    }
    let prefix = prefix_activation(params, image, start);

    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut done = 0;
    while done < cfg.n_samples {
        let end = (done + CHUNK).min(cfg.n_samples);
        let samples: Vec<Vec<f64>> = (done..end)
            .into_par_iter()
            .map(|t| {
                let mut rng = derived_rng(cfg.seed, t as u64);
                let (z, _) = forward_from(params, start, prefix.clone(), &cfg.dropout, Some(&mut rng))?;
                Ok(z.values().iter().map(|&v| sigmoid(v).to_f64_lossy()).collect())
            })
            .collect::<Result<_>>()?;
        for s in &samples {
            for ((a, b), &p) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(s) {
                *a += p;
                *b += p * p;
            }
        }
        done = end;
    }
    let inv = 1.0 / cfg.n_samples as f64;
    let mean: Vec<f64> = sum.iter().map(|&s| s * inv).collect();
    let std: Vec<T> = sum_sq
        .iter()
        .zip(&mean)
        .map(|(&q, &m)| T::lit((q * inv - m * m).max(0.0).sqrt().min(0.5)))
        .collect();
    Ok(McPrediction {
        mean: Grid2D::from_vec(h, w, mean.into_iter().map(|m| T::lit(m.clamp(0.0, 1.0))).collect())?,
        std: Grid2D::from_vec(h, w, std)?,
    })
}
