//! Gated recurrent unit over a `T x N x D` sequence.
//!
//! Per step:
//! ```text
//! z  = sigmoid(x Wz + h Uz + bz)
//! r  = sigmoid(x Wr + h Ur + br)
//! h~ = tanh(x Wh + (r * h) Uh + bh)
//! h' = (1 - z) * h + z * h~
//! ```
//! With all weights zero, `z = 0.5` and `h~ = 0`, so the state halves each step.

use super::{gemm, MatLayout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Borrowed gate weights: input maps `D x H`, recurrent maps `H x H`, biases `H`.
#[derive(Clone, Copy)]
pub struct GruWeights<'a, T> {
    pub wz: &'a Tensor<T>,
    pub wr: &'a Tensor<T>,
    pub wh: &'a Tensor<T>,
    pub uz: &'a Tensor<T>,
    pub ur: &'a Tensor<T>,
    pub uh: &'a Tensor<T>,
    pub bz: &'a Tensor<T>,
    pub br: &'a Tensor<T>,
    pub bh: &'a Tensor<T>,
}

impl<'a, T: Scalar> GruWeights<'a, T> {
    /// Order used everywhere the nine tensors travel as a list.
    pub const NAMES: [&'static str; 9] = ["wz", "wr", "wh", "uz", "ur", "uh", "bz", "br", "bh"];

    pub fn from_slice(w: [&'a Tensor<T>; 9]) -> Self {
        GruWeights { wz: w[0], wr: w[1], wh: w[2], uz: w[3], ur: w[4], uh: w[5], bz: w[6], br: w[7], bh: w[8] }
    }

    fn as_array(&self) -> [&'a Tensor<T>; 9] {
        [self.wz, self.wr, self.wh, self.uz, self.ur, self.uh, self.bz, self.br, self.bh]
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let ws = self.wz.shape();
        if ws.len() != 2 {
            return Err(Error::shape(format!("gru input weights must be D×H, got {ws:?}")));
        }
        let (d, h) = (ws[0], ws[1]);
        let expected: [&[usize]; 9] = [&[d, h], &[d, h], &[d, h], &[h, h], &[h, h], &[h, h], &[h], &[h], &[h]];
        for ((name, t), exp) in Self::NAMES.iter().zip(self.as_array()).zip(expected) {
            if t.shape() != exp {
                return Err(Error::shape(format!("gru weight {name} has shape {:?}, expected {exp:?}", t.shape())));
            }
        }
        Ok((d, h))
    }
}

/// Activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    steps: usize,
    batch: usize,
    hidden: usize,
    /// States `h_0 .. h_T`, each `N x H`.
    states: Vec<T>,
    z: Vec<T>,
    r: Vec<T>,
    cand: Vec<T>,
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn rows_of_bias<T: Scalar>(bias: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(bias.len() * n);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    out
}

/// `acc += a (m x k) * b (k x n)` for row-major operands.
fn matmul_acc<T: Scalar>(a: &[T], b: &[T], acc: &mut [T], m: usize, k: usize, n: usize) {
    gemm(a, MatLayout::row_major(m, k), b, MatLayout::row_major(k, n), T::one(), acc, MatLayout::row_major(m, n));
}

/// One recurrent step. Returns `(z, r, candidate, h_next)`, each `N x H`.
fn step<T: Scalar>(x: &[T], h: &[T], w: &GruWeights<'_, T>, n: usize, d: usize, hd: usize) -> [Vec<T>; 4] {
    let mut az = rows_of_bias(w.bz.data(), n);
    matmul_acc(x, w.wz.data(), &mut az, n, d, hd);
    matmul_acc(h, w.uz.data(), &mut az, n, hd, hd);
    let mut ar = rows_of_bias(w.br.data(), n);
    matmul_acc(x, w.wr.data(), &mut ar, n, d, hd);
    matmul_acc(h, w.ur.data(), &mut ar, n, hd, hd);
    let z: Vec<T> = az.into_iter().map(sigmoid).collect();
    let r: Vec<T> = ar.into_iter().map(sigmoid).collect();
    let rh: Vec<T> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
    let mut ac = rows_of_bias(w.bh.data(), n);
    matmul_acc(x, w.wh.data(), &mut ac, n, d, hd);
    matmul_acc(&rh, w.uh.data(), &mut ac, n, hd, hd);
    let cand: Vec<T> = ac.into_iter().map(T::tanh).collect();
    let next = h
        .iter()
        .zip(&z)
        .zip(&cand)
        .map(|((&hp, &zi), &ci)| (T::one() - zi) * hp + zi * ci)
        .collect();
    [z, r, cand, next]
}

/// Runs the unit over every step of `inputs` (`T x N x D`) starting from `h0`
/// (`N x H`). Returns all hidden states `T x N x H` and the saved cache.
pub fn gru_forward<T: Scalar>(
    inputs: &Tensor<T>,
    h0: &Tensor<T>,
    w: &GruWeights<'_, T>,
) -> Result<(Tensor<T>, GruCache<T>)> {
    let (d, hd) = w.dims()?;
    let is = inputs.shape();
    if is.len() != 3 || is[2] != d {
        return Err(Error::shape(format!("gru inputs must be T×N×{d}, got {is:?}")));
    }
    let (steps, n) = (is[0], is[1]);
    if h0.shape() != [n, hd] {
        return Err(Error::shape(format!("gru initial state {:?} does not match N×H = {n}×{hd}", h0.shape())));
    }
    let nh = n * hd;
    let mut cache = GruCache {
        steps,
        batch: n,
        hidden: hd,
        states: Vec::with_capacity((steps + 1) * nh),
        z: Vec::with_capacity(steps * nh),
        r: Vec::with_capacity(steps * nh),
        cand: Vec::with_capacity(steps * nh),
    };
    cache.states.extend_from_slice(h0.data());
    for t in 0..steps {
        let x = &inputs.data()[t * n * d..(t + 1) * n * d];
        let h = &cache.states[t * nh..(t + 1) * nh];
        let [z, r, cand, next] = step(x, h, w, n, d, hd);
        cache.z.extend(z);
        cache.r.extend(r);
        cache.cand.extend(cand);
        cache.states.extend(next);
    }
    let outputs = Tensor::new(vec![steps, n, hd], cache.states[nh..].to_vec())?;
    Ok((outputs, cache))
}

/// Gradients of a GRU pass, weights in [`GruWeights::NAMES`] order.
#[derive(Debug, Clone)]
pub struct GruGrads<T> {
    pub d_inputs: Tensor<T>,
    pub d_h0: Tensor<T>,
    pub d_weights: [Tensor<T>; 9],
}

/// Backpropagation through all `T` steps.
pub fn gru_backward<T: Scalar>(
    inputs: &Tensor<T>,
    w: &GruWeights<'_, T>,
    cache: &GruCache<T>,
    d_outputs: &Tensor<T>,
) -> GruGrads<T> {
    let (steps, n, hd) = (cache.steps, cache.batch, cache.hidden);
    let d = inputs.shape()[2];
    let nh = n * hd;
    let one = T::one();
    let mut dw: [Vec<T>; 9] = std::array::from_fn(|i| vec![T::zero(); w.as_array()[i].len()]);
    let mut d_inputs = vec![T::zero(); inputs.len()];
    let mut carry = vec![T::zero(); nh];

    // transposed views of the row-major weight buffers
    let (wz_t, wr_t, wh_t) = (w.wz.data(), w.wr.data(), w.wh.data());
    let (uz_t, ur_t, uh_t) = (w.uz.data(), w.ur.data(), w.uh.data());
    let (wz_l, wr_l, wh_l) = (MatLayout::transposed(hd, d), MatLayout::transposed(hd, d), MatLayout::transposed(hd, d));
    let (uz_l, ur_l, uh_l) = (MatLayout::transposed(hd, hd), MatLayout::transposed(hd, hd), MatLayout::transposed(hd, hd));

    for t in (0..steps).rev() {
        let x = &inputs.data()[t * n * d..(t + 1) * n * d];
        let h_prev = &cache.states[t * nh..(t + 1) * nh];
        let z = &cache.z[t * nh..(t + 1) * nh];
        let r = &cache.r[t * nh..(t + 1) * nh];
        let c = &cache.cand[t * nh..(t + 1) * nh];
        let dh: Vec<T> = d_outputs.data()[t * nh..(t + 1) * nh]
            .iter()
            .zip(&carry)
            .map(|(&a, &b)| a + b)
            .collect();

        let mut dh_prev: Vec<T> = dh.iter().zip(z).map(|(&g, &zi)| g * (one - zi)).collect();
        let da_c: Vec<T> = (0..nh).map(|i| dh[i] * z[i] * (one - c[i] * c[i])).collect();
        let da_z: Vec<T> = (0..nh).map(|i| dh[i] * (c[i] - h_prev[i]) * z[i] * (one - z[i])).collect();

        let rh: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
        let mut d_rh = vec![T::zero(); nh];
        gemm(&da_c, MatLayout::row_major(n, hd), uh_t, uh_l, T::zero(), &mut d_rh, MatLayout::row_major(n, hd));
        let da_r: Vec<T> = (0..nh).map(|i| d_rh[i] * h_prev[i] * r[i] * (one - r[i])).collect();
        for i in 0..nh {
            dh_prev[i] += d_rh[i] * r[i];
        }

        let x_t = MatLayout::transposed(d, n);
        let h_t = MatLayout::transposed(hd, n);
        let acc = MatLayout::row_major;
        // input weights
        gemm(x, x_t, &da_z, acc(n, hd), one, &mut dw[0], acc(d, hd));
        gemm(x, x_t, &da_r, acc(n, hd), one, &mut dw[1], acc(d, hd));
        gemm(x, x_t, &da_c, acc(n, hd), one, &mut dw[2], acc(d, hd));
        // recurrent weights
        gemm(h_prev, h_t, &da_z, acc(n, hd), one, &mut dw[3], acc(hd, hd));
        gemm(h_prev, h_t, &da_r, acc(n, hd), one, &mut dw[4], acc(hd, hd));
        gemm(&rh, h_t, &da_c, acc(n, hd), one, &mut dw[5], acc(hd, hd));
        for (bias, da) in [(6, &da_z), (7, &da_r), (8, &da_c)] {
            for row in da.chunks_exact(hd) {
                for (b, g) in dw[bias].iter_mut().zip(row) {
                    *b += *g;
                }
            }
        }
        let dx = &mut d_inputs[t * n * d..(t + 1) * n * d];
        gemm(&da_z, acc(n, hd), wz_t, wz_l, one, dx, acc(n, d));
        gemm(&da_r, acc(n, hd), wr_t, wr_l, one, dx, acc(n, d));
        gemm(&da_c, acc(n, hd), wh_t, wh_l, one, dx, acc(n, d));
        gemm(&da_z, acc(n, hd), uz_t, uz_l, one, &mut dh_prev, acc(n, hd));
        gemm(&da_r, acc(n, hd), ur_t, ur_l, one, &mut dh_prev, acc(n, hd));
        carry = dh_prev;
    }

    let shapes = w.as_array().map(|t| t.shape().to_vec());
    let mut it = dw.into_iter().zip(shapes);
    let d_weights = std::array::from_fn(|_| {
        let (data, shape) = it.next().unwrap();
        Tensor::new(shape, data).unwrap()
    });
    GruGrads {
        d_inputs: Tensor::new(inputs.shape().to_vec(), d_inputs).unwrap(),
        d_h0: Tensor::new(vec![n, hd], carry).unwrap(),
        d_weights,
    }
}
