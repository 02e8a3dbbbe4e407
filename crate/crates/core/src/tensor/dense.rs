use super::{gemm, MatLayout, Scalar, Tensor};
use crate::error::{Error, Result};

fn dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (is, ws) = (input.shape(), weights.shape());
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::shape(format!("dense expects N×D input and D×U weights, got {is:?} and {ws:?}")));
    }
    if is[1] != ws[0] {
        return Err(Error::shape(format!("dense input width D={} but weights have D={}", is[1], ws[0])));
    }
    if bias.shape() != [ws[1]] {
        return Err(Error::shape(format!("dense bias {:?} does not match U={}", bias.shape(), ws[1])));
    }
    Ok((is[0], is[1], ws[1]))
}

pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, u) = dims(input, weights, bias)?;
    let mut out = Vec::with_capacity(n * u);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        input.data(),
        MatLayout::row_major(n, d),
        weights.data(),
        MatLayout::row_major(d, u),
        T::one(),
        &mut out,
        MatLayout::row_major(n, u),
    );
    Tensor::new(vec![n, u], out)
}

/// Returns `(d_input, d_weights, d_bias)`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let u = weights.shape()[1];
    let mut d_in = vec![T::zero(); n * d];
    gemm(
        d_out.data(),
        MatLayout::row_major(n, u),
        weights.data(),
        MatLayout::transposed(u, d),
        T::zero(),
        &mut d_in,
        MatLayout::row_major(n, d),
    );
    let mut d_w = vec![T::zero(); d * u];
    gemm(
        input.data(),
        MatLayout::transposed(d, n),
        d_out.data(),
        MatLayout::row_major(n, u),
        T::zero(),
        &mut d_w,
        MatLayout::row_major(d, u),
    );
    let mut d_b = vec![T::zero(); u];
    for row in d_out.data().chunks_exact(u.max(1)) {
        for (acc, g) in d_b.iter_mut().zip(row) {
            *acc += *g;
        }
    }
    (
        Tensor::new(vec![n, d], d_in).unwrap(),
        Tensor::new(vec![d, u], d_w).unwrap(),
        Tensor::new(vec![u], d_b).unwrap(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_through() {
        let x = Tensor::<f32>::from_fn(vec![3, 4], |i| i as f32 * 0.5 - 2.0);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let out = dense_forward(&x, &eye, &Tensor::zeros(vec![4])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn inner_dim_mismatch() {
        let x = Tensor::<f32>::zeros(vec![2, 3]);
        let w = Tensor::zeros(vec![4, 2]);
        let err = dense_forward(&x, &w, &Tensor::zeros(vec![2])).unwrap_err();
        assert!(err.to_string().contains("D=3"));
    }

    #[test]
    fn backward_matches_hand_values() {
        let x = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let g = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let (dx, dw, db) = dense_backward(&x, &w, &g);
        assert_eq!(dx.data(), &[3.0, 4.0]);
        assert_eq!(dw.data(), &[1.0, 2.0]);
        assert_eq!(db.data(), &[1.0]);
    }
}
