//! Synthetic segmentation subjects with a known per-voxel posterior.
//!
//! Each subject is built from a handful of random ellipses. The crisp union
//! indicator is blurred to give the reference posterior `q`, labels are drawn
//! as `Bernoulli(q)`, and the image is the indicator plus Gaussian noise. A
//! network that recovers `q` from the image is calibrated by construction.
//!
//! Randomness: subject `i` of a dataset with seed `s` draws from a ChaCha20
//! stream keyed by `s` on stream number `i`, so subjects are independent of
//! generation order and may be produced concurrently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::scalar::Real;
use crate::subject::Subject;

const PLACEMENT_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Voxels per side.
    pub grid_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Semi-axis range in voxels.
    pub min_axis: f64,
    pub max_axis: f64,
    pub intensity_fg: f64,
    pub intensity_bg: f64,
    pub noise_sigma: f64,
    /// Label-uncertainty width in voxels.
    pub blur_sigma: f64,
    /// When set, eval_mask is the indicator dilated by this many voxels
    /// instead of the full grid.
    pub mask_dilation: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            min_axis: 6.0,
            max_axis: 14.0,
            intensity_fg: 1.0,
            intensity_bg: 0.0,
            noise_sigma: 0.3,
            blur_sigma: 1.5,
            mask_dilation: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.grid_size < 3 {
            return bad(format!("grid_size must be >= 3, got {}", self.grid_size));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return bad(format!(
                "shape count range [{}, {}] is invalid",
                self.min_shapes, self.max_shapes
            ));
        }
        if !(self.min_axis > 0.0 && self.min_axis <= self.max_axis) {
            return bad(format!(
                "axis range [{}, {}] is invalid",
                self.min_axis, self.max_axis
            ));
        }
        if !(self.intensity_fg.is_finite() && self.intensity_bg.is_finite())
            || self.intensity_fg == self.intensity_bg
        {
            return bad("intensity_fg and intensity_bg must be finite and differ".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad(format!("blur_sigma must be >= 0, got {}", self.blur_sigma));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentShape {
    /// (row, col) of the ellipse center.
    pub center: (f64, f64),
    /// Semi-axes along the rotated column and row directions.
    pub axes: (f64, f64),
    pub rotation: f64,
}

impl LatentShape {
    pub fn contains(&self, row: f64, col: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = col - self.center.1;
        let dy = row - self.center.0;
        let u = (dx * c + dy * s) / self.axes.0;
        let v = (-dx * s + dy * c) / self.axes.1;
        u * u + v * v <= 1.0
    }
}

/// A rendered subject together with its latent construction.
#[derive(Clone, Debug)]
pub struct SyntheticCase {
    pub subject: Subject<f64>,
    pub indicator: Grid2D<f64>,
    pub shapes: Vec<LatentShape>,
}

pub fn subject_id(index: usize) -> String {
    format!("synth-{index:04}")
}

/// Renders subject `subject_index`; deterministic in `(config, subject_index)`.
pub fn render_subject(config: &SynthConfig, subject_index: usize) -> Result<Subject<f64>> {
    render_case(config, subject_index).map(|c| c.subject)
}

pub fn render_case(config: &SynthConfig, subject_index: usize) -> Result<SyntheticCase> {
    config.validate()?;
    let n = config.grid_size;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    rng.set_stream(subject_index as u64);

    let shapes = sample_shapes(config, &mut rng)?;
    let indicator = Grid2D::from_fn(n, n, |r, c| {
        let inside = shapes.iter().any(|s| s.contains(r as f64, c as f64));
        if inside {
            1.0
        } else {
            0.0
        }
    })?;

    let posterior = gaussian_blur(&indicator, config.blur_sigma)?.map(|v| v.clamp(0.0, 1.0));

    let labels = posterior.map(|q| if rng.random::<f64>() < q { 1.0 } else { 0.0 });

    let contrast = config.intensity_fg - config.intensity_bg;
    let mut image = indicator.map(|m| config.intensity_bg + contrast * m);
    if config.noise_sigma > 0.0 {
        for v in image.values_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += config.noise_sigma * z;
        }
    }

    let eval_mask = match config.mask_dilation {
        None => Grid2D::filled(n, n, 1.0)?,
        Some(r) => dilate(&indicator, r),
    };

    let subject = Subject::new(subject_id(subject_index), image, labels, eval_mask)?
        .with_reference_posterior(posterior)?;
    Ok(SyntheticCase {
        subject,
        indicator,
        shapes,
    })
}

/// Renders `count` subjects, indices `0..count`.
pub fn render_dataset(config: &SynthConfig, count: usize) -> Result<Vec<Subject<f64>>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| render_subject(config, i))
        .collect()
}

fn sample_shapes(config: &SynthConfig, rng: &mut ChaCha20Rng) -> Result<Vec<LatentShape>> {
    let n = config.grid_size as f64;
    let count = rng.random_range(config.min_shapes..=config.max_shapes);
    let margin = (3.0 * config.blur_sigma).ceil() + 1.0;
    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let a = rng.random_range(config.min_axis..=config.max_axis);
            let b = rng.random_range(config.min_axis..=config.max_axis);
            let rotation = rng.random_range(0.0..std::f64::consts::PI);
            let reach = a.max(b) + margin;
            let (lo, hi) = (reach, n - 1.0 - reach);
            if lo > hi {
                continue;
            }
            let row = rng.random_range(lo..=hi);
            let col = rng.random_range(lo..=hi);
            placed = Some(LatentShape {
                center: (row, col),
                axes: (a, b),
                rotation,
            });
            break;
        }
        shapes.push(placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place shape {k} inside a {n}x{n} grid after {PLACEMENT_RETRIES} attempts"
            ))
        })?);
    }
    Ok(shapes)
}

/// Binary dilation with a Euclidean disk of the given radius.
pub fn dilate<T: Real>(mask: &Grid2D<T>, radius: usize) -> Grid2D<T> {
    let (h, w) = mask.shape();
    let r = radius as isize;
    let mut out = mask.map(|_| T::zero());
    for row in 0..h {
        for col in 0..w {
            if mask.get(row, col) != T::one() {
                continue;
            }
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let (rr, cc) = (row as isize + dr, col as isize + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        out.set(rr as usize, cc as usize, T::one());
                    }
                }
            }
        }
    }
    out
}

/// Normalized Gaussian taps for offsets `-radius..=radius`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    let radius = (T::lit(3.0) * sigma).ceil().to_usize().unwrap_or(0);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let mut taps: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::from_usize_lossy(i) - T::from_usize_lossy(radius);
            (-(d * d) / two_s2).exp()
        })
        .collect();
    let total: T = taps.iter().copied().sum();
    for t in &mut taps {
        *t /= total;
    }
    taps
}

/// Mirror index into `[0, n)` (edge sample repeated: `d c b a | a b c d`).
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur with reflective boundaries; `sigma = 0` is the identity.
pub fn gaussian_blur<T: Real>(grid: &Grid2D<T>, sigma: T) -> Result<Grid2D<T>> {
    if !(sigma >= T::zero()) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == T::zero() {
        return Ok(grid.clone());
    }
    let taps = gaussian_kernel(sigma);
    let radius = (taps.len() / 2) as isize;
    let (h, w) = grid.shape();

    let mut rows = grid.map(|_| T::zero());
    for r in 0..h {
        for c in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                let cc = reflect(c as isize + k as isize - radius, w);
                acc += t * grid.get(r, cc);
            }
            rows.set(r, c, acc);
        }
    }
    let mut out = rows.clone();
    for r in 0..h {
        for c in 0..w {
            let mut acc = T::zero();
            for (k, &t) in taps.iter().enumerate() {
                let rr = reflect(r as isize + k as isize - radius, h);
                acc += t * rows.get(rr, c);
            }
            out.set(r, c, acc);
        }
    }
    Ok(out)
}

/// The reference posterior used directly as a class-1 confidence map.
pub fn oracle_confidence<T: Real>(subject: &Subject<T>) -> Result<Grid2D<T>> {
    subject.reference_posterior.clone().ok_or_else(|| {
        Error::Data(format!("subject {} has no reference posterior", subject.id))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let cfg = SynthConfig {
            seed: 11,
            ..Default::default()
        };
        let a = render_subject(&cfg, 3).unwrap();
        let b = render_subject(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = render_subject(&cfg, 4).unwrap();
        assert_ne!(a.image, c.image);
        let batch = render_dataset(&cfg, 5).unwrap();
        assert_eq!(batch[3], a);
    }

    #[test]
    fn zero_blur_means_no_label_noise() {
        let cfg = SynthConfig {
            blur_sigma: 0.0,
            ..Default::default()
        };
        let case = render_case(&cfg, 0).unwrap();
        let q = case.subject.reference_posterior.as_ref().unwrap();
        assert_eq!(q, &case.indicator);
        assert_eq!(case.subject.labels, case.indicator);
    }

    #[test]
    fn posterior_and_labels_ranges() {
        let cfg = SynthConfig::default();
        for i in 0..5 {
            let s = render_subject(&cfg, i).unwrap();
            assert!(s.reference_posterior.as_ref().unwrap().is_probability());
            assert!(s.labels.is_binary());
            assert_eq!(s.eval_mask.count_ones(), 64 * 64);
        }
    }

    #[test]
    fn ellipse_center_is_certain() {
        let cfg = SynthConfig {
            min_shapes: 1,
            max_shapes: 1,
            min_axis: 12.0,
            max_axis: 14.0,
            blur_sigma: 1.0,
            ..Default::default()
        };
        let case = render_case(&cfg, 2).unwrap();
        let s = &case.shapes[0];
        let q = case.subject.reference_posterior.unwrap();
        let (r, c) = (s.center.0.round() as usize, s.center.1.round() as usize);
        assert!((q.get(r, c) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn half_plane_boundary_is_half() {
        // Mask is 1 for col >= 10; voxels 9 and 10 straddle the boundary.
        let m = Grid2D::<f64>::from_fn(20, 20, |_, c| if c >= 10 { 1.0 } else { 0.0 }).unwrap();
        let q = gaussian_blur(&m, 1.5).unwrap();
        let mid = 0.5 * (q.get(10, 9) + q.get(10, 10));
        assert!((mid - 0.5).abs() < 0.01);
        assert!((q.get(10, 9) + q.get(10, 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_identity_and_constant() {
        let g = Grid2D::from_fn(7, 9, |r, c| (r * 9 + c) as f64).unwrap();
        assert_eq!(gaussian_blur(&g, 0.0).unwrap(), g);
        let k = Grid2D::<f64>::filled(5, 6, 0.37).unwrap();
        for sigma in [0.5, 1.0, 2.5, 4.0] {
            let b = gaussian_blur(&k, sigma).unwrap();
            assert!(b.values().iter().all(|v| (v - 0.37).abs() < 1e-14));
        }
        assert!(gaussian_blur(&g, -1.0).is_err());
    }

    #[test]
    fn impulse_matches_dense_convolution() {
        // Interior impulse: reflection never engages, so a dense 2D convolution
        // with the outer-product kernel is an exact oracle.
        let n = 15;
        let mut g = Grid2D::zeros(n, n).unwrap();
        g.set(7, 7, 1.0);
        let sigma = 1.0f64;
        let blurred = gaussian_blur(&g, sigma).unwrap();

        let radius = 3isize;
        let w1: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = w1.iter().sum();
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let (dr, dc) = (r as isize - i as isize, c as isize - j as isize);
                        if dr.abs() <= radius && dc.abs() <= radius {
                            let k = w1[(dr + radius) as usize] * w1[(dc + radius) as usize]
                                / (norm * norm);
                            acc += k * g.get(i, j);
                        }
                    }
                }
                assert!((acc - blurred.get(r, c)).abs() < 1e-15);
            }
        }
        let center_tap = 1.0 / norm;
        assert!((blurred.get(7, 7) - center_tap * center_tap).abs() < 1e-15);
    }

    #[test]
    fn dilated_mask_option() {
        let cfg = SynthConfig {
            mask_dilation: Some(2),
            ..Default::default()
        };
        let case = render_case(&cfg, 1).unwrap();
        let mask = &case.subject.eval_mask;
        let fg = case.indicator.count_ones();
        assert!(mask.count_ones() > fg);
        assert!(mask.count_ones() < 64 * 64);
        for (m, i) in mask.values().iter().zip(case.indicator.values()) {
            assert!(*m >= *i);
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let cfg = SynthConfig {
            grid_size: 16,
            min_axis: 10.0,
            max_axis: 12.0,
            ..Default::default()
        };
        assert!(matches!(render_subject(&cfg, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn oracle_requires_posterior() {
        let s = render_subject(&SynthConfig::default(), 0).unwrap();
        assert!(oracle_confidence(&s).is_ok());
        let mut bare = s.clone();
        bare.reference_posterior = None;
        assert!(matches!(oracle_confidence(&bare), Err(Error::Data(_))));
    }

    #[test]
    fn config_validation() {
        let bad = [
            SynthConfig { intensity_fg: 0.0, ..Default::default() },
            SynthConfig { noise_sigma: -1.0, ..Default::default() },
            SynthConfig { blur_sigma: -0.1, ..Default::default() },
            SynthConfig { min_shapes: 4, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
    }
}
