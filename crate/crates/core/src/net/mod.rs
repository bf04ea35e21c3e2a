//! The segmentation network: four padding-preserving convolutions.
//!
//! ```text
//! L1 3x3 1->8 ReLU | L2 3x3 8->8 ReLU | L3 3x3 8->8 ReLU | L4 1x1 8->1 (logit)
//! ```
//!
//! Dropout sites sit on the inputs of L2, L3 and L4. Gradients are written by
//! hand; `backward` replays the dropout masks recorded by `forward`.

pub mod conv;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::scalar::Real;
use conv::{conv2d_backward, conv2d_forward, ConvDims};

pub const LAYER_COUNT: usize = 4;
pub const HIDDEN_CHANNELS: usize = 8;

/// `(out_ch, in_ch, kernel)` per layer.
pub const ARCHITECTURE: [(usize, usize, usize); LAYER_COUNT] = [
    (HIDDEN_CHANNELS, 1, 3),
    (HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3),
    (HIDDEN_CHANNELS, HIDDEN_CHANNELS, 3),
    (1, HIDDEN_CHANNELS, 1),
];

/// Stable identifier of `ARCHITECTURE`, recorded in checkpoints.
pub fn architecture_fingerprint() -> u64 {
    let desc: String = ARCHITECTURE
        .iter()
        .map(|(o, i, k)| format!("conv{k}x{k}:{i}->{o};"))
        .collect();
    fnv1a(desc.as_bytes())
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer<T> {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub frozen: bool,
}

impl<T: Real> ConvLayer<T> {
    fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        Self {
            out_ch,
            in_ch,
            k,
            weights: vec![T::zero(); out_ch * in_ch * k * k],
            bias: vec![T::zero(); out_ch],
            frozen: false,
        }
    }

    fn dims(&self, height: usize, width: usize) -> ConvDims {
        ConvDims {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            k: self.k,
            height,
            width,
        }
    }
}

/// All weights of the network plus per-layer freeze flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams<T> {
    pub layers: Vec<ConvLayer<T>>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros() -> Self {
        Self {
            layers: ARCHITECTURE
                .iter()
                .map(|&(o, i, k)| ConvLayer::zeros(o, i, k))
                .collect(),
        }
    }

    /// He-normal weights, zero biases.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros();
        for layer in &mut p.layers {
            let fan_in = (layer.in_ch * layer.k * layer.k) as f64;
            let std = (2.0 / fan_in).sqrt();
            for w in &mut layer.weights {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = T::lit(std * z);
            }
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != LAYER_COUNT {
            return Err(Error::Configuration(format!(
                "expected {LAYER_COUNT} layers, got {}",
                self.layers.len()
            )));
        }
        for (idx, (layer, &(o, i, k))) in self.layers.iter().zip(&ARCHITECTURE).enumerate() {
            if (layer.out_ch, layer.in_ch, layer.k) != (o, i, k)
                || layer.weights.len() != o * i * k * k
                || layer.bias.len() != o
            {
                return Err(Error::Configuration(format!("layer L{} has wrong shape", idx + 1)));
            }
            if !layer.weights.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow(format!("layer L{} has non-finite weights", idx + 1)));
            }
        }
        Ok(())
    }

    pub fn set_frozen(&mut self, frozen: [bool; LAYER_COUNT]) {
        for (layer, f) in self.layers.iter_mut().zip(frozen) {
            layer.frozen = f;
        }
    }

    pub fn frozen_flags(&self) -> [bool; LAYER_COUNT] {
        std::array::from_fn(|i| self.layers[i].frozen)
    }

    /// Freezes every layer below `first_trainable`.
    pub fn freeze_below(&mut self, first_trainable: usize) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.frozen = i < first_trainable;
        }
    }

    pub fn first_unfrozen(&self) -> Option<usize> {
        self.layers.iter().position(|l| !l.frozen)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Flat copy of every weight then bias, layer by layer.
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Internal(format!(
                "flat parameter vector has {} entries, network needs {}",
                flat.len(),
                self.parameter_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    out_ch: l.out_ch,
                    in_ch: l.in_ch,
                    k: l.k,
                    weights: l.weights.iter().map(|w| U::lit(w.to_f64_lossy())).collect(),
                    bias: l.bias.iter().map(|w| U::lit(w.to_f64_lossy())).collect(),
                    frozen: l.frozen,
                })
                .collect(),
        }
    }
}

/// Dropout placement. Site `BeforeL{n}` drops the input of layer `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DropoutSite {
    BeforeL2,
    BeforeL3,
    BeforeL4,
}

impl DropoutSite {
    /// Zero-based index of the layer whose input is dropped.
    pub fn layer(self) -> usize {
        match self {
            DropoutSite::BeforeL2 => 1,
            DropoutSite::BeforeL3 => 2,
            DropoutSite::BeforeL4 => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub sites: BTreeSet<DropoutSite>,
    pub rate: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl DropoutConfig {
    pub fn none() -> Self {
        Self {
            sites: BTreeSet::new(),
            rate: 0.0,
        }
    }

    pub fn new(sites: impl IntoIterator<Item = DropoutSite>, rate: f64) -> Result<Self> {
        let cfg = Self {
            sites: sites.into_iter().collect(),
            rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Before each "decoder" block and before the output convolution.
    pub fn decoder(rate: f64) -> Result<Self> {
        Self::new([DropoutSite::BeforeL3, DropoutSite::BeforeL4], rate)
    }

    /// Around the network center.
    pub fn center(rate: f64) -> Result<Self> {
        Self::new([DropoutSite::BeforeL2, DropoutSite::BeforeL3], rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::Parameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.sites.is_empty() || self.rate == 0.0
    }

    fn active_at(&self, layer: usize) -> bool {
        self.rate > 0.0 && self.sites.iter().any(|s| s.layer() == layer)
    }

    /// Lowest layer whose input is dropped, if any.
    pub fn first_site_layer(&self) -> Option<usize> {
        if self.rate == 0.0 {
            return None;
        }
        self.sites.iter().map(|s| s.layer()).min()
    }
}

/// Channel stack `[channel][row][col]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Activation<T> {
    pub fn from_grid(g: &Grid2D<T>) -> Self {
        Self {
            channels: 1,
            height: g.height(),
            width: g.width(),
            data: g.values().to_vec(),
        }
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    /// Layer index the pass started at.
    pub start: usize,
    pub height: usize,
    pub width: usize,
    /// `inputs[l]` is the (post-dropout) input of layer `start + l`.
    inputs: Vec<Vec<T>>,
    /// Scaled keep masks (0 or 1/(1-rate)) of dropout applied before layer `start + l`.
    masks: Vec<Option<Vec<T>>>,
    /// Post-ReLU outputs of hidden layers, indexed like `inputs`.
    relu_out: Vec<Vec<T>>,
}

/// Gradients aligned with `NetParams::layers`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(p: &NetParams<T>) -> Self {
        Self {
            weights: p.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: p.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients<T>, scale: T) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += scale * y);
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += scale * y);
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|v| *v == T::zero())
    }
}

/// Full forward pass from the image.
///
/// `rng` is required when dropout is active; with an empty site set or rate 0
/// the pass is deterministic and draws nothing.
pub fn forward<T: Real, R: Rng>(
    params: &NetParams<T>,
    image: &Grid2D<T>,
    dropout: &DropoutConfig,
    rng: Option<&mut R>,
) -> Result<(Grid2D<T>, ForwardCache<T>)> {
    if image.height() < 3 || image.width() < 3 {
        return Err(Error::Dimension(format!(
            "network input must be at least 3x3, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    forward_from(params, 0, Activation::from_grid(image), dropout, rng)
}

/// Deterministic activation entering layer `upto` (no dropout applied).
pub fn prefix_activation<T: Real>(params: &NetParams<T>, image: &Grid2D<T>, upto: usize) -> Activation<T> {
    let (h, w) = image.shape();
    let mut act = Activation::from_grid(image);
    for layer in &params.layers[..upto.min(LAYER_COUNT)] {
        let mut out = vec![T::zero(); layer.out_ch * h * w];
        conv2d_forward(layer.dims(h, w), &act.data, &layer.weights, &layer.bias, &mut out);
        relu_in_place(&mut out);
        act = Activation {
            channels: layer.out_ch,
            height: h,
            width: w,
            data: out,
        };
    }
    act
}

/// Forward pass starting at layer `start` from a precomputed input activation.
pub fn forward_from<T: Real, R: Rng>(
    params: &NetParams<T>,
    start: usize,
    input: Activation<T>,
    dropout: &DropoutConfig,
    mut rng: Option<&mut R>,
) -> Result<(Grid2D<T>, ForwardCache<T>)> {
    dropout.validate()?;
    if start >= LAYER_COUNT || params.layers[start].in_ch != input.channels {
        return Err(Error::Internal(format!(
            "activation with {} channels cannot enter layer L{}",
            input.channels,
            start + 1
        )));
    }
    let (h, w) = (input.height, input.width);
    let keep = 1.0 - dropout.rate;
    let scale = T::lit(1.0 / keep);

    let mut cache = ForwardCache {
        start,
        height: h,
        width: w,
        inputs: Vec::with_capacity(LAYER_COUNT - start),
        masks: Vec::with_capacity(LAYER_COUNT - start),
        relu_out: Vec::with_capacity(LAYER_COUNT - start),
    };
    let mut current = input.data;
    for idx in start..LAYER_COUNT {
        let layer = &params.layers[idx];
        if dropout.active_at(idx) {
            let r = rng.as_deref_mut().ok_or_else(|| {
                Error::Parameter("dropout is active but no random state was supplied".into())
            })?;
            let mask: Vec<T> = (0..current.len())
                .map(|_| if r.random::<f64>() < keep { scale } else { T::zero() })
                .collect();
            cache.relu_out.push(current.clone());
            current.iter_mut().zip(&mask).for_each(|(v, &m)| *v *= m);
            cache.masks.push(Some(mask));
        } else {
            cache.relu_out.push(current.clone());
            cache.masks.push(None);
        }
        let mut out = vec![T::zero(); layer.out_ch * h * w];
        conv2d_forward(layer.dims(h, w), &current, &layer.weights, &layer.bias, &mut out);
        cache.inputs.push(current);
        if idx + 1 < LAYER_COUNT {
            relu_in_place(&mut out);
        }
        current = out;
    }
    // relu_out[l] holds the pre-dropout input of layer start+l; shift so that
    // relu_out[l] is the post-ReLU output of layer start+l (needed for ReLU').
    cache.relu_out.remove(0);
    let logits = Grid2D::from_vec(h, w, current)?;
    if !logits.all_finite() {
        return Err(Error::NumericOverflow("non-finite logits in forward pass".into()));
    }
    Ok((logits, cache))
}

#[inline]
fn relu_in_place<T: Real>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

/// Exact gradients for all unfrozen layers; frozen layers receive zeros.
pub fn backward<T: Real>(
    params: &NetParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &Grid2D<T>,
) -> Result<Gradients<T>> {
    let (h, w) = (cache.height, cache.width);
    if dlogits.shape() != (h, w) {
        return Err(Error::Internal(format!(
            "dlogits shape {:?} does not match cached pass {:?}",
            dlogits.shape(),
            (h, w)
        )));
    }
    if cache.inputs.len() != LAYER_COUNT - cache.start {
        return Err(Error::Internal("forward cache is incomplete".into()));
    }
    let lowest_trainable = match params.first_unfrozen() {
        None => return Ok(Gradients::zeros_like(params)),
        Some(l) => l,
    };
    if lowest_trainable < cache.start {
        return Err(Error::Internal(format!(
            "layer L{} is trainable but the cached pass started at L{}",
            lowest_trainable + 1,
            cache.start + 1
        )));
    }

    let mut grads = Gradients::zeros_like(params);
    let mut upstream = dlogits.values().to_vec();
    for idx in (cache.start..LAYER_COUNT).rev() {
        let local = idx - cache.start;
        let layer = &params.layers[idx];
        let need_input_grad = idx > lowest_trainable;
        let mut grad_in = if need_input_grad {
            Some(vec![T::zero(); layer.in_ch * h * w])
        } else {
            None
        };
        if layer.frozen {
            let mut scratch_w = vec![T::zero(); layer.weights.len()];
            let mut scratch_b = vec![T::zero(); layer.bias.len()];
            conv2d_backward(
                layer.dims(h, w),
                &cache.inputs[local],
                &layer.weights,
                &upstream,
                &mut scratch_w,
                &mut scratch_b,
                grad_in.as_deref_mut(),
            );
        } else {
            conv2d_backward(
                layer.dims(h, w),
                &cache.inputs[local],
                &layer.weights,
                &upstream,
                &mut grads.weights[idx],
                &mut grads.bias[idx],
                grad_in.as_deref_mut(),
            );
        }
        let Some(mut g) = grad_in else { break };
        if let Some(mask) = &cache.masks[local] {
            g.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
        }
        // Input of layer idx is ReLU output of layer idx-1.
        let relu = &cache.relu_out[local - 1];
        g.iter_mut().zip(relu).for_each(|(v, &a)| {
            if a <= T::zero() {
                *v = T::zero();
            }
        });
        upstream = g;
    }
    Ok(grads)
}

/// Deterministic logits (no dropout).
pub fn predict_logits<T: Real>(params: &NetParams<T>, image: &Grid2D<T>) -> Result<Grid2D<T>> {
    forward::<T, ChaCha8Rng>(params, image, &DropoutConfig::none(), None).map(|(z, _)| z)
}
