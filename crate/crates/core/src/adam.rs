//! Adam with bias-corrected moments over groups of parameter slices.

use crate::scalar::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment buffers, one per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(group_sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = group_sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// One update. Groups with `trainable[g] == false` and their moments are left untouched.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], trainable: &[bool], lr: T) {
        assert_eq!(params.len(), self.m.len(), "parameter group count mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient group count mismatch");
        self.step += 1;
        let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPSILON));
        let t = self.step as i32;
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        for (g_idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if !trainable[g_idx] {
                continue;
            }
            let (m, v) = (&mut self.m[g_idx], &mut self.v[g_idx]);
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
