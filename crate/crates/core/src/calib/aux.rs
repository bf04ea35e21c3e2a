use serde::{Deserialize, Serialize};

use super::fit::{fit_loop, FitConfig, FitReport};
use super::platt::PlattParams;
use crate::error::{Error, Result};
use crate::grid::{sigmoid, Grid2D};
use crate::loss::ce_loss_and_grad;
use crate::net::conv::{conv2d_backward, conv2d_forward, ConvDims};
use crate::scalar::Real;
use crate::subject::Subject;

pub const DEFAULT_AUX_KERNEL: usize = 5;

/// Single k x k convolution over the logit map (zero padded) plus a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxConvParams<T> {
    pub k: usize,
    /// Row-major k x k taps.
    pub kernel: Vec<T>,
    pub bias: T,
}

impl<T: Real> AuxConvParams<T> {
    /// Center tap 1, everything else 0: reproduces `sigmoid(z)`.
    pub fn identity(k: usize) -> Result<Self> {
        check_kernel_size(k)?;
        let mut kernel = vec![T::zero(); k * k];
        kernel[(k / 2) * k + k / 2] = T::one();
        Ok(Self {
            k,
            kernel,
            bias: T::zero(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_kernel_size(self.k)?;
        if self.kernel.len() != self.k * self.k {
            return Err(Error::Parameter("kernel length does not match k".into()));
        }
        if !self.kernel.iter().all(|v| v.is_finite()) || !self.bias.is_finite() {
            return Err(Error::NumericOverflow("non-finite aux-conv parameters".into()));
        }
        Ok(())
    }

    /// Only meaningful for `k = 1`.
    pub fn as_platt(&self) -> Option<PlattParams<T>> {
        (self.k == 1).then(|| PlattParams {
            a: self.kernel[0],
            b: self.bias,
        })
    }
}

impl<T: Real> From<PlattParams<T>> for AuxConvParams<T> {
    fn from(p: PlattParams<T>) -> Self {
        Self {
            k: 1,
            kernel: vec![p.a],
            bias: p.b,
        }
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::Parameter(format!("aux-conv kernel size must be odd, got {k}")));
    }
    Ok(())
}

fn dims(k: usize, z: &Grid2D<impl Real>) -> ConvDims {
    ConvDims {
        in_ch: 1,
        out_ch: 1,
        k,
        height: z.height(),
        width: z.width(),
    }
}

fn conv_logits<T: Real>(k: usize, kernel: &[T], bias: T, z: &Grid2D<T>) -> Grid2D<T> {
    let mut out = vec![T::zero(); z.len()];
    conv2d_forward(dims(k, z), z.values(), kernel, &[bias], &mut out);
    Grid2D::from_vec(z.height(), z.width(), out).expect("same shape as input")
}

pub fn apply_aux_conv<T: Real>(params: &AuxConvParams<T>, logits: &Grid2D<T>) -> Grid2D<T> {
    conv_logits(params.k, &params.kernel, params.bias, logits).map(sigmoid)
}

/// Fits a k x k calibrator starting from the identity kernel.
pub fn fit_aux_conv<T: Real>(
    fit: &[&Subject<T>],
    stop: &[&Subject<T>],
    k: usize,
    cfg: &FitConfig,
) -> Result<(AuxConvParams<T>, FitReport)> {
    let init = AuxConvParams::<T>::identity(k)?;
    for s in fit.iter().chain(stop) {
        let (h, w) = s.shape();
        if h < k || w < k {
            return Err(Error::Parameter(format!(
                "subject {} ({h}x{w}) is smaller than the {k}x{k} kernel",
                s.id
            )));
        }
    }
    let kk = k * k;
    let mut flat = init.kernel.clone();
    flat.push(init.bias);
    let loss_grad = |p: &[T], s: &Subject<T>| -> Result<(T, Vec<T>)> {
        let z = s.cached_logits()?;
        let scaled = conv_logits(k, &p[..kk], p[kk], z);
        let (loss, ds) = ce_loss_and_grad(&scaled, &s.labels, &s.eval_mask)?;
        let mut gw = vec![T::zero(); kk];
        let mut gb = [T::zero()];
        conv2d_backward(dims(k, z), z.values(), &p[..kk], ds.values(), &mut gw, &mut gb, None);
        gw.push(gb[0]);
        Ok((loss, gw))
    };
    let (p, report) = fit_loop(flat, fit, stop, cfg, loss_grad)?;
    let params = AuxConvParams {
        k,
        kernel: p[..kk].to_vec(),
        bias: p[kk],
    };
    params.validate()?;
    Ok((params, report))
}
