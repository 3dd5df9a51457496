//! Convolution, rectifier and upsample-add fusion, each with its backward pass.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Square-kernel convolution with "same" padding `(k - 1) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub name: String,
    /// `(out, in, k, k)`
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrads<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        ConvGrads {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrads<T>) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = *v * s;
        }
    }
}

#[inline]
pub fn out_size(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: impl Into<String>, weight: Tensor<T>, bias: Vec<T>, stride: usize) -> Result<Self> {
        let name = name.into();
        let d = weight.dims();
        if d.len() != 4 || d[2] != d[3] || d[2].is_multiple_of(2) {
            return Err(Error::shape(&name, format!("weight dims {d:?} must be (o, i, k, k), k odd")));
        }
        if bias.len() != d[0] {
            return Err(Error::shape(&name, format!("{} biases for {} filters", bias.len(), d[0])));
        }
        if stride == 0 {
            return Err(Error::shape(&name, "stride must be >= 1"));
        }
        Ok(Conv2d {
            name,
            weight,
            bias,
            stride,
        })
    }

    pub fn zeros(name: impl Into<String>, out_ch: usize, in_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(
            name,
            Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            vec![T::zero(); out_ch],
            stride,
        )
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            name: self.name.clone(),
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            stride: self.stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvCache<T>)> {
        if x.dims().len() != 3 || x.dims()[0] != self.in_channels() {
            return Err(Error::shape(
                &self.name,
                format!("input {:?}, expected {} channels", x.dims(), self.in_channels()),
            ));
        }
        let (c, h, w) = x.chw();
        let k = self.kernel();
        let (oh, ow) = (out_size(h, self.stride), out_size(w, self.stride));
        let cols = im2col(x.data(), (c, h, w), k, self.stride, (oh, ow));
        let o = self.out_channels();
        let n = oh * ow;
        let mut out = Vec::with_capacity(o * n);
        for &b in &self.bias {
            out.extend(std::iter::repeat_n(b, n));
        }
        T::gemm(o, c * k * k, n, self.weight.data(), false, &cols, false, T::one(), &mut out);
        let y = Tensor::from_vec(&[o, oh, ow], out)?;
        if cfg!(debug_assertions) && !y.all_finite() {
            return Err(Error::NonFiniteActivation {
                layer: self.name.clone(),
            });
        }
        Ok((
            y,
            ConvCache {
                cols,
                in_dims: (c, h, w),
                out_hw: (oh, ow),
            },
        ))
    }

    /// Returns `(grad_input, grads)`; `grad_input` is skipped when `need_input` is false.
    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        grad_out: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, ConvGrads<T>)> {
        let o = self.out_channels();
        let (oh, ow) = cache.out_hw;
        if grad_out.dims() != [o, oh, ow] {
            return Err(Error::shape(
                &self.name,
                format!("upstream gradient {:?}, expected {:?}", grad_out.dims(), [o, oh, ow]),
            ));
        }
        let (c, h, w) = cache.in_dims;
        let k = self.kernel();
        let n = oh * ow;
        let ckk = c * k * k;
        let g = grad_out.data();

        let mut gw = vec![T::zero(); o * ckk];
        T::gemm(o, n, ckk, g, false, &cache.cols, true, T::zero(), &mut gw);
        let gb = g.chunks_exact(n).map(|row| row.iter().copied().sum()).collect();

        let gx = if need_input {
            let mut gcols = vec![T::zero(); ckk * n];
            T::gemm(ckk, o, n, self.weight.data(), true, g, false, T::zero(), &mut gcols);
            Some(Tensor::from_vec(
                &[c, h, w],
                col2im(&gcols, (c, h, w), k, self.stride, (oh, ow)),
            )?)
        } else {
            None
        };
        Ok((gx, ConvGrads { weight: gw, bias: gb }))
    }
}

fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let n = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let pad = (k - 1) / 2;
    let n = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the rectifier's output: zero where the output was not positive.
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
}

fn check_fuse_dims(
    current: (usize, usize, usize),
    higher: (usize, usize, usize),
) -> Result<()> {
    if current.0 != higher.0 {
        return Err(Error::shape(
            "fuse",
            format!(
                "channel mismatch: current {} vs higher {} (project first)",
                current.0, higher.0
            ),
        ));
    }
    if higher.1 != current.1.div_ceil(2) || higher.2 != current.2.div_ceil(2) {
        return Err(Error::shape(
            "fuse",
            format!("higher map {higher:?} is not half of current {current:?}"),
        ));
    }
    Ok(())
}

/// `current + crop(upsample2x_nearest(higher))`.
pub fn fuse<T: Scalar>(current: &Tensor<T>, higher: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = current.chw();
    let (_, hh, hw) = higher.chw();
    check_fuse_dims((c, h, w), higher.chw())?;
    let mut out = current.clone();
    let o = out.data_mut();
    let hd = higher.data();
    for ci in 0..c {
        for y in 0..h {
            let src = &hd[(ci * hh + y / 2) * hw..(ci * hh + y / 2 + 1) * hw];
            let dst = &mut o[(ci * h + y) * w..(ci * h + y + 1) * w];
            for (x, d) in dst.iter_mut().enumerate() {
                *d += src[x / 2];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`fuse`] with respect to `higher`: each 2x2 window of the
/// upstream gradient summed onto its source cell. The gradient with respect
/// to `current` is the upstream gradient itself.
pub fn fuse_backward_higher<T: Scalar>(
    grad_out: &Tensor<T>,
    higher_dims: (usize, usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = grad_out.chw();
    check_fuse_dims((c, h, w), higher_dims)?;
    let (_, hh, hw) = higher_dims;
    let mut g = Tensor::zeros(&[c, hh, hw]);
    let gd = g.data_mut();
    let src = grad_out.data();
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                gd[(ci * hh + y / 2) * hw + x / 2] += src[(ci * h + y) * w + x];
            }
        }
    }
    Ok(g)
}
