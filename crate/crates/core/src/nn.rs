//! Convolution primitive with hand-written backward pass.
//!
//! Convolutions are lowered to a matrix product over an im2col buffer so that
//! `f32`/`f64` instantiations hit ndarray's optimized GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square 2-D convolution. The weight is stored flattened as
/// `(out_channels, in_channels * kernel * kernel)` in row-major `(c, ky, kx)`
/// order, which is the layout of a `(out, in, k, k)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Parameter gradients of one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        Self {
            weight: Array2::zeros(conv.weight.raw_dim()),
            bias: Array1::zeros(conv.bias.raw_dim()),
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.weight.mapv_inplace(|w| w * factor);
        self.bias.mapv_inplace(|b| b * factor);
    }

    pub fn add_assign(&mut self, other: &ConvGrad<T>) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn sq_norm(&self) -> T {
        self.weight.iter().chain(self.bias.iter()).map(|&g| g * g).sum()
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// Normal weights with the given standard deviation and a constant bias.
    pub fn init_normal<R: Rng>(&mut self, rng: &mut R, std: f64, bias: f64) {
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight.mapv_inplace(|_| T::lit(normal.sample(rng)));
        self.bias.fill(T::lit(bias));
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn check_input(&self, input: &ArrayView3<T>) -> Result<()> {
        let c = input.shape()[0];
        if c != self.in_channels {
            return Err(Error::Wiring {
                junction: "conv input".into(),
                expected: self.in_channels,
                got: c,
            });
        }
        Ok(())
    }

    fn im2col(&self, input: &ArrayView3<T>) -> Array2<T> {
        let (c, h, w) = input.dim();
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let pad = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            dst[oy * ow + ox] = input[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<T>, c: usize, h: usize, w: usize) -> Array3<T> {
        let (oh, ow) = self.output_size(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut out = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[[ci, iy as usize, ix as usize]] =
                                out[[ci, iy as usize, ix as usize]] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, input: ArrayView3<T>) -> Result<Array3<T>> {
        self.check_input(&input)?;
        let (_, h, w) = input.dim();
        let (oh, ow) = self.output_size(h, w);
        let mut out = Array2::zeros((self.out_channels, oh * ow));
        if self.kernel == 1 && self.stride == 1 && self.padding == 0 {
            let flat = input
                .to_owned()
                .into_shape_with_order((self.in_channels, h * w))
                .expect("contiguous input");
            general_mat_mul(T::one(), &self.weight, &flat, T::zero(), &mut out);
        } else {
            let cols = self.im2col(&input);
            general_mat_mul(T::one(), &self.weight, &cols, T::zero(), &mut out);
        }
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        Ok(out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("output shape"))
    }

    /// Gradient with respect to the input; parameter gradients are
    /// accumulated into `param_grad` when given.
    pub fn backward(
        &self,
        input: ArrayView3<T>,
        grad_out: ArrayView3<T>,
        param_grad: Option<&mut ConvGrad<T>>,
    ) -> Array3<T> {
        let (c, h, w) = input.dim();
        let (oh, ow) = self.output_size(h, w);
        let g = grad_out
            .to_owned()
            .into_shape_with_order((self.out_channels, oh * ow))
            .expect("grad shape");
        let pointwise = self.kernel == 1 && self.stride == 1 && self.padding == 0;
        let cols = if pointwise {
            input
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous input")
        } else {
            self.im2col(&input)
        };
        if let Some(pg) = param_grad {
            general_mat_mul(T::one(), &g, &cols.t(), T::one(), &mut pg.weight);
            for (gb, row) in pg.bias.iter_mut().zip(g.axis_iter(Axis(0))) {
                *gb = *gb + row.sum();
            }
        }
        let mut gcols = Array2::zeros(cols.raw_dim());
        general_mat_mul(T::one(), &self.weight.t(), &g, T::zero(), &mut gcols);
        if pointwise {
            gcols.into_shape_with_order((c, h, w)).expect("grad shape")
        } else {
            self.col2im(&gcols, c, h, w)
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Array3<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Masks `grad` by the activation pattern of a ReLU whose output is `activated`.
pub fn relu_backward_inplace<T: Scalar>(grad: &mut Array3<T>, activated: &Array3<T>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}
