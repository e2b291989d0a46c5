//! 2-D cross-correlation over NHWC tensors, lowered to a GEMM via im2col.
//!
//! Output extents:
//! - `Valid`: `out = (in - k) / stride + 1`, no padding, requires `k <= in`.
//! - `Same`: `out = ceil(in / stride)`, zero padding of
//!   `max((out - 1) * stride + k - in, 0)` split with the smaller half on top/left.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::{Grads, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (k <= input).then(|| ((input - k) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || kernel[0] != kernel[1] || kernel[2] != input[3]
        {
            return Err(TensorError::mismatch("conv2d", input, kernel));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let k = kernel[0];
        let too_big = || {
            TensorError::invalid(
                "conv2d",
                format!("kernel {k}x{k} larger than input {}x{}", input[1], input[2]),
            )
        };
        let (out_h, pad_top) = out_extent(input[1], k, stride, padding).ok_or_else(too_big)?;
        let (out_w, pad_left) = out_extent(input[2], k, stride, padding).ok_or_else(too_big)?;
        Ok(ConvGeom {
            batch: input[0],
            h: input[1],
            w: input[2],
            cin: input[3],
            cout: kernel[3],
            k,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.cin
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds kernel tap; each
    /// tap covers `cin` contiguous values on both sides.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = (b * self.out_h + oy) * self.out_w + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad_left as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.k + kx) * self.cin;
                            let src =
                                ((b * self.h + iy as usize) * self.w + ix as usize) * self.cin;
                            f(col, src);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `input: [n, h, w, c_in]` with `kernel: [k, k, c_in, c_out]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        self.ensure_live()?;
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let x = self.value(input).data();
        let mut cols = vec![T::zero(); geom.rows() * geom.patch()];
        geom.for_each_tap(|col, src| {
            cols[col..col + geom.cin].copy_from_slice(&x[src..src + geom.cin]);
        });
        let mut out = vec![T::zero(); geom.rows() * geom.cout];
        T::gemm(
            geom.rows(),
            geom.patch(),
            geom.cout,
            &cols,
            false,
            self.value(kernel).data(),
            false,
            &mut out,
            false,
        );
        let out = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, geom.cout], out)?;
        self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        )
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    geom: &ConvGeom,
    cols: &[T],
    kernel: &Tensor<T>,
    input: Var,
    kernel_var: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let (rows, patch, cout) = (geom.rows(), geom.patch(), geom.cout);
    if grads.wants(kernel_var) {
        T::gemm(
            patch,
            rows,
            cout,
            cols,
            true,
            g,
            false,
            grads.slot(kernel_var),
            true,
        );
    }
    if grads.wants(input) {
        let mut dcols = vec![T::zero(); rows * patch];
        T::gemm(
            rows,
            cout,
            patch,
            g,
            false,
            kernel.data(),
            true,
            &mut dcols,
            false,
        );
        let slot = grads.slot(input);
        geom.for_each_tap(|col, src| {
            for c in 0..geom.cin {
                slot[src + c] += dcols[col + c];
            }
        });
    }
}
