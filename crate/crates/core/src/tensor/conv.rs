use super::{gemm, MatLayout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Output extent of a strided window sweep: `floor((len + 2 pad - k) / stride) + 1`.
pub fn conv_output_dim(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], bias: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape(format!("conv2d input must be NCHW, got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(Error::shape(format!("conv2d kernel must be OIHW, got {kernel:?}")));
        }
        let [n, c, h, w] = [input[0], input[1], input[2], input[3]];
        let [o, i, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if i != c {
            return Err(Error::shape(format!(
                "conv2d input has {c} channels but kernel expects I={i}"
            )));
        }
        if bias != [o] {
            return Err(Error::shape(format!("conv2d bias {bias:?} does not match O={o}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        let oh = conv_output_dim(h, kh, stride, pad).ok_or_else(|| {
            Error::shape(format!("conv2d H+2p={} smaller than kernel H={kh}", h + 2 * pad))
        })?;
        let ow = conv_output_dim(w, kw, stride, pad).ok_or_else(|| {
            Error::shape(format!("conv2d W+2p={} smaller than kernel W={kw}", w + 2 * pad))
        })?;
        Ok(ConvGeom { n, c, h, w, o, kh, kw, stride, pad, oh, ow })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let ohw = self.oh * self.ow;
        let positions = self.positions();
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    for ni in 0..self.n {
                        let plane = (ni * self.c + ci) * self.h * self.w;
                        for oy in 0..self.oh {
                            let y = (oy * self.stride + ky) as isize - self.pad as isize;
                            if y < 0 || y >= self.h as isize {
                                continue;
                            }
                            let base = row * positions + ni * ohw + oy * self.ow;
                            for ox in 0..self.ow {
                                let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                if x < 0 || x >= self.w as isize {
                                    continue;
                                }
                                f(base + ox, plane + y as usize * self.w + x as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.patch() * self.positions()];
        self.for_each_tap(|dst, src| cols[dst] = input[src]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dinput: &mut [T]) {
        self.for_each_tap(|src, dst| dinput[dst] += cols[src]);
    }
}

/// NCHW convolution with an OIHW kernel, zero padding and square stride.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let cols = g.im2col(input.data());
    let positions = g.positions();
    let mut out_mat = vec![T::zero(); g.o * positions];
    gemm(
        kernel.data(),
        MatLayout::row_major(g.o, g.patch()),
        &cols,
        MatLayout::row_major(g.patch(), positions),
        T::zero(),
        &mut out_mat,
        MatLayout::row_major(g.o, positions),
    );
    let ohw = g.oh * g.ow;
    let mut out = vec![T::zero(); g.n * g.o * ohw];
    for oi in 0..g.o {
        let b = bias.data()[oi];
        for ni in 0..g.n {
            let src = &out_mat[oi * positions + ni * ohw..][..ohw];
            let dst = &mut out[(ni * g.o + oi) * ohw..][..ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), bias.shape(), stride, pad)?;
    let ohw = g.oh * g.ow;
    let positions = g.positions();
    if d_out.shape() != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d upstream gradient {:?} does not match output",
            d_out.shape()
        )));
    }
    let mut dout_mat = vec![T::zero(); g.o * positions];
    let mut d_bias = vec![T::zero(); g.o];
    for oi in 0..g.o {
        for ni in 0..g.n {
            let src = &d_out.data()[(ni * g.o + oi) * ohw..][..ohw];
            dout_mat[oi * positions + ni * ohw..][..ohw].copy_from_slice(src);
            for v in src {
                d_bias[oi] += *v;
            }
        }
    }
    let cols = g.im2col(input.data());
    let mut d_kernel = vec![T::zero(); g.o * g.patch()];
    gemm(
        &dout_mat,
        MatLayout::row_major(g.o, positions),
        &cols,
        MatLayout::transposed(positions, g.patch()),
        T::zero(),
        &mut d_kernel,
        MatLayout::row_major(g.o, g.patch()),
    );
    let mut d_cols = vec![T::zero(); g.patch() * positions];
    gemm(
        kernel.data(),
        MatLayout::transposed(g.patch(), g.o),
        &dout_mat,
        MatLayout::row_major(g.o, positions),
        T::zero(),
        &mut d_cols,
        MatLayout::row_major(g.patch(), positions),
    );
    let mut d_input = vec![T::zero(); input.len()];
    g.col2im(&d_cols, &mut d_input);
    Ok((
        Tensor::new(input.shape().to_vec(), d_input)?,
        Tensor::new(kernel.shape().to_vec(), d_kernel)?,
        Tensor::new(vec![g.o], d_bias)?,
    ))
}
