use super::conv::conv_output_dim;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Max pooling over `window x window` patches. Returns the output and, per
/// output cell, the flat input index that won (first maximum in row-major
/// window order).
pub fn max_pool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let shape = input.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("max_pool2d input must be NCHW, got {shape:?}")));
    }
    let [n, c, h, w] = [shape[0], shape[1], shape[2], shape[3]];
    if window == 0 || stride == 0 {
        return Err(Error::shape("max_pool2d window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::shape(format!(
            "max_pool2d window {window} exceeds spatial dims {h}x{w}"
        )));
    }
    let oh = conv_output_dim(h, window, stride, 0).expect("window fits");
    let ow = conv_output_dim(w, window, stride, 0).expect("window fits");
    let data = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + window {
                        // strict comparison keeps the first maximum
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, argmax))
}

pub fn max_pool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Tensor<T> {
    let mut d_in = Tensor::zeros(input_shape.to_vec());
    let buf = d_in.data_mut();
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        buf[idx] += g;
    }
    d_in
}
