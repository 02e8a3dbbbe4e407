use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) const PROB_FLOOR: f64 = 1e-7;

/// Mean of `-ln(clamp(p[n, target_n], 1e-7, 1))` over the batch.
pub fn cross_entropy_forward<T: Scalar>(probs: &Tensor<T>, targets: &[usize]) -> Result<T> {
    let shape = probs.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("cross-entropy expects N×C probabilities, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    if targets.len() != n {
        return Err(Error::shape(format!("{} targets for batch of {n}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidLabel(format!("target class {bad} out of range for C={c}")));
    }
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let total: T = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -probs.data()[i * c + t].max(floor).min(T::one()).ln())
        .sum();
    Ok(total / T::from_usize(n).unwrap())
}

pub(crate) fn cross_entropy_backward<T: Scalar>(probs: &Tensor<T>, targets: &[usize], d_loss: T) -> Tensor<T> {
    let (n, c) = (probs.shape()[0], probs.shape()[1]);
    let floor = T::from_f64_lossy(PROB_FLOOR);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut d = Tensor::zeros(probs.shape().to_vec());
    for (i, &t) in targets.iter().enumerate() {
        let p = probs.data()[i * c + t];
        // the clamp is flat outside [floor, 1]
        if p >= floor && p <= T::one() {
            d.data_mut()[i * c + t] = -d_loss * inv_n / p;
        }
    }
    d
}
