use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Cross-channel local response normalization constants.
///
/// `b[c] = a[c] / (k + alpha * sum_{c' in window(c)} a[c']^2)^beta`, where the
/// window spans `n` channels starting at `c - (n - 1) / 2` and is clipped at
/// the channel edges. Alpha is not divided by `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrnParams {
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams { n: 5, k: 2.0, alpha: 1e-4, beta: 0.75 }
    }
}

impl LrnParams {
    fn window(&self, c: usize, channels: usize) -> std::ops::Range<usize> {
        let lo = c.saturating_sub((self.n - 1) / 2);
        let hi = (c + self.n / 2 + 1).min(channels);
        lo..hi
    }
}

/// Returns the output and the per-element denominators base `k + alpha * sum`.
pub fn lrn_forward<T: Scalar>(input: &Tensor<T>, p: &LrnParams) -> Result<(Tensor<T>, Vec<T>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("local_response_norm input must be NCHW, got {shape:?}")));
    }
    if p.n == 0 {
        return Err(Error::config("local_response_norm window n must be at least 1"));
    }
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let hw = h * w;
    let a = input.data();
    let k = T::from_f64_lossy(p.k);
    let alpha = T::from_f64_lossy(p.alpha);
    let beta = T::from_f64_lossy(p.beta);
    let mut scale = vec![T::zero(); a.len()];
    let mut out = vec![T::zero(); a.len()];
    for ni in 0..n {
        let sample = ni * c * hw;
        for ci in 0..c {
            for pos in 0..hw {
                let mut sq = T::zero();
                for cj in p.window(ci, c) {
                    let v = a[sample + cj * hw + pos];
                    sq += v * v;
                }
                let idx = sample + ci * hw + pos;
                let s = k + alpha * sq;
                scale[idx] = s;
                out[idx] = a[idx] * s.powf(-beta);
            }
        }
    }
    Ok((Tensor::new(shape.to_vec(), out)?, scale))
}

pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &[T],
    p: &LrnParams,
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let shape = input.shape();
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    let hw = h * w;
    let a = input.data();
    let g = d_out.data();
    let alpha = T::from_f64_lossy(p.alpha);
    let beta = T::from_f64_lossy(p.beta);
    let two = T::from_f64_lossy(2.0);
    let mut d_in = vec![T::zero(); a.len()];
    for ni in 0..n {
        let sample = ni * c * hw;
        for ci in 0..c {
            for pos in 0..hw {
                let i = sample + ci * hw + pos;
                let s = scale[i];
                d_in[i] += g[i] * s.powf(-beta);
                // contribution of every a[j] inside channel ci's window
                let common = two * alpha * beta * g[i] * a[i] * s.powf(-beta - T::one());
                for cj in p.window(ci, c) {
                    let j = sample + cj * hw + pos;
                    d_in[j] -= common * a[j];
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), d_in).expect("same shape as input")
}
