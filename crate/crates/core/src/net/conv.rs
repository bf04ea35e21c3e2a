//! Zero-padded "same" 2D convolution (cross-correlation) over channel stacks.
//!
//! Layouts: activations `[channel][row][col]`, weights `[out][in][ky][kx]`.

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub height: usize,
    pub width: usize,
}

impl ConvDims {
    #[inline]
    fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_ch + i) * self.k + ky) * self.k + kx
    }

    /// Output rows/cols `[lo, hi)` whose shifted source stays inside the grid.
    #[inline]
    fn span(offset: isize, n: usize) -> (usize, usize) {
        let lo = (-offset).max(0) as usize;
        let hi = (n as isize - offset.max(0)).max(0) as usize;
        (lo, hi.max(lo))
    }
}

/// `out[o] = bias[o] + sum_i w[o,i] * in[i]`.
pub fn conv2d_forward<T: Real>(d: ConvDims, input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    debug_assert_eq!(input.len(), d.in_ch * d.plane());
    debug_assert_eq!(out.len(), d.out_ch * d.plane());
    let (w, plane, pad) = (d.width, d.plane(), (d.k / 2) as isize);
    for o in 0..d.out_ch {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..d.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = ConvDims::span(dy, d.height);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = ConvDims::span(dx, d.width);
                    let wv = weights[d.widx(o, i, ky, kx)];
                    if wv == T::zero() || x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s = &src[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                        let t = &mut dst[y * w + x0..y * w + x1];
                        for (a, &b) in t.iter_mut().zip(s) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `grad_input` is given, the
/// gradient with respect to the input.
pub fn conv2d_backward<T: Real>(
    d: ConvDims,
    input: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    mut grad_input: Option<&mut [T]>,
) {
    let (w, plane, pad) = (d.width, d.plane(), (d.k / 2) as isize);
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.iter_mut().for_each(|v| *v = T::zero());
    }
    for o in 0..d.out_ch {
        let go = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] += go.iter().copied().sum::<T>();
        for i in 0..d.in_ch {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = ConvDims::span(dy, d.height);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = ConvDims::span(dx, d.width);
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = d.widx(o, i, ky, kx);
                    let wv = weights[widx];
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * w + (x0 as isize + dx) as usize;
                        let s1 = sy * w + (x1 as isize + dx) as usize;
                        let g = &go[y * w + x0..y * w + x1];
                        for (&a, &b) in g.iter().zip(&src[s0..s1]) {
                            acc += a * b;
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let t = &mut gi[i * plane + s0..i * plane + s1];
                            for (a, &b) in t.iter_mut().zip(g) {
                                *a += wv * b;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition: out[o,y,x] = b[o] + sum w[o,i,ky,kx] * in[i, y+ky-p, x+kx-p].
    fn naive(d: ConvDims, input: &[f64], weights: &[f64], bias: &[f64]) -> Vec<f64> {
        let p = (d.k / 2) as isize;
        let mut out = vec![0.0; d.out_ch * d.height * d.width];
        for o in 0..d.out_ch {
            for y in 0..d.height as isize {
                for x in 0..d.width as isize {
                    let mut acc = bias[o];
                    for i in 0..d.in_ch {
                        for ky in 0..d.k as isize {
                            for kx in 0..d.k as isize {
                                let (sy, sx) = (y + ky - p, x + kx - p);
                                if sy < 0 || sx < 0 || sy >= d.height as isize || sx >= d.width as isize {
                                    continue;
                                }
                                let wi = ((o * d.in_ch + i) * d.k + ky as usize) * d.k + kx as usize;
                                acc += weights[wi]
                                    * input[(i * d.height + sy as usize) * d.width + sx as usize];
                            }
                        }
                    }
                    out[(o * d.height + y as usize) * d.width + x as usize] = acc;
                }
            }
        }
        out
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn forward_matches_naive_for_odd_kernels() {
        let mut s = 17u64;
        for &(in_ch, out_ch, k, h, w) in &[(1, 3, 3, 5, 7), (2, 2, 5, 6, 4), (3, 1, 1, 4, 4), (1, 1, 7, 3, 3)] {
            let d = ConvDims { in_ch, out_ch, k, height: h, width: w };
            let input: Vec<f64> = (0..in_ch * h * w).map(|_| lcg(&mut s)).collect();
            let weights: Vec<f64> = (0..out_ch * in_ch * k * k).map(|_| lcg(&mut s)).collect();
            let bias: Vec<f64> = (0..out_ch).map(|_| lcg(&mut s)).collect();
            let mut out = vec![0.0; out_ch * h * w];
            conv2d_forward(d, &input, &weights, &bias, &mut out);
            let expect = naive(d, &input, &weights, &bias);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <grad_out, conv(x)> is linear in x and w; gradients must match the
        // naive forward evaluated on unit perturbations.
        let mut s = 5u64;
        let d = ConvDims { in_ch: 2, out_ch: 3, k: 3, height: 4, width: 5 };
        let input: Vec<f64> = (0..2 * 20).map(|_| lcg(&mut s)).collect();
        let weights: Vec<f64> = (0..3 * 2 * 9).map(|_| lcg(&mut s)).collect();
        let zero_b = vec![0.0; 3];
        let go: Vec<f64> = (0..3 * 20).map(|_| lcg(&mut s)).collect();
        let mut gw = vec![0.0; weights.len()];
        let mut gb = vec![0.0; 3];
        let mut gi = vec![0.0; input.len()];
        conv2d_backward(d, &input, &weights, &go, &mut gw, &mut gb, Some(&mut gi));
        let dot = |v: &[f64]| v.iter().zip(&go).map(|(a, b)| a * b).sum::<f64>();
        for j in 0..weights.len() {
            let mut e = vec![0.0; weights.len()];
            e[j] = 1.0;
            assert!((dot(&naive(d, &input, &e, &zero_b)) - gw[j]).abs() < 1e-12);
        }
        for j in 0..input.len() {
            let mut e = vec![0.0; input.len()];
            e[j] = 1.0;
            assert!((dot(&naive(d, &e, &weights, &zero_b)) - gi[j]).abs() < 1e-12);
        }
        for o in 0..3 {
            let expect: f64 = go[o * 20..(o + 1) * 20].iter().sum();
            assert!((gb[o] - expect).abs() < 1e-12);
        }
    }
}
