use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(input.shape().to_vec(), data).unwrap()
}

/// Subgradient at zero is zero.
pub(crate) fn relu_backward<T: Scalar>(input: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).unwrap()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = input.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape(format!("softmax expects N×C with C ≥ 2, got {shape:?}")));
    }
    let c = shape[1];
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / total;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Tensor<T> {
    let c = output.shape()[1];
    let mut d_in = Vec::with_capacity(output.len());
    for (y, g) in output.data().chunks_exact(c).zip(d_out.data().chunks_exact(c)) {
        let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        d_in.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)));
    }
    Tensor::new(output.shape().to_vec(), d_in).unwrap()
}
