//! 2-D convolution via im2col + GEMM.
//!
//! The batch is folded into the GEMM column dimension, so one forward call
//! is a single `Cout × (Cin·kh·kw)` by `(Cin·kh·kw) × (N·Ho·Wo)` product.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be >= 1".into()));
        }
        if wcin != cin {
            return Err(TensorError::Dimension(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if bias.shape() != [cout] {
            return Err(TensorError::Dimension(format!(
                "conv2d: bias shape {:?}, expected [{cout}]",
                bias.shape()
            )));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::Config(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// For output coordinate `o` and kernel tap `k`, the input coordinate, if in bounds.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
        let p = (o * stride + k) as isize - pad as isize;
        (p >= 0 && (p as usize) < size).then_some(p as usize)
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (hw_out, cols) = (self.ho * self.wo, self.cols());
        let mut out = vec![T::zero(); self.k() * cols];
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst_row = &mut out[row * cols..(row + 1) * cols];
                    for b in 0..self.n {
                        let plane = &x[(b * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                                continue;
                            };
                            let dst = &mut dst_row[b * hw_out + oy * self.wo..][..self.wo];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                    *d = plane[iy * self.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<T: Scalar>(&self, cols_buf: &[T], dx: &mut [T]) {
        let (hw_out, cols) = (self.ho * self.wo, self.cols());
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src_row = &cols_buf[row * cols..(row + 1) * cols];
                    for b in 0..self.n {
                        let plane =
                            &mut dx[(b * self.cin + ci) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                                continue;
                            };
                            let src = &src_row[b * hw_out + oy * self.wo..][..self.wo];
                            for (ox, &g) in src.iter().enumerate() {
                                if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                    let d = &mut plane[iy * self.w + ix];
                                    *d = *d + g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    geo: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let cols = geo.im2col(input.data());
    let ncols = geo.cols();
    let mut y = vec![T::zero(); geo.cout * ncols];
    T::gemm(geo.cout, geo.k(), ncols, weight.data(), false, &cols, false, T::zero(), &mut y);
    // [Cout, N·Ho·Wo] -> [N, Cout, Ho, Wo] with bias
    let hw = geo.ho * geo.wo;
    let mut out = vec![T::zero(); geo.n * geo.cout * hw];
    for co in 0..geo.cout {
        let b = bias.data()[co];
        for n in 0..geo.n {
            let src = &y[co * ncols + n * hw..][..hw];
            let dst = &mut out[(n * geo.cout + co) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    Tensor::new(&[geo.n, geo.cout, geo.ho, geo.wo], out).expect("conv output shape")
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    geo: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let hw = geo.ho * geo.wo;
    let ncols = geo.cols();
    // [N, Cout, Ho, Wo] -> [Cout, N·Ho·Wo]
    let mut g = vec![T::zero(); geo.cout * ncols];
    for co in 0..geo.cout {
        for n in 0..geo.n {
            g[co * ncols + n * hw..][..hw]
                .copy_from_slice(&grad_out.data()[(n * geo.cout + co) * hw..][..hw]);
        }
    }
    let weight_grad = need[1].then(|| {
        let cols = geo.im2col(input.data());
        let mut dw = vec![T::zero(); geo.cout * geo.k()];
        T::gemm(geo.cout, ncols, geo.k(), &g, false, &cols, true, T::zero(), &mut dw);
        Tensor::new(weight.shape(), dw).expect("weight grad shape")
    });
    let bias_grad = need[2].then(|| {
        let db = (0..geo.cout)
            .map(|co| g[co * ncols..(co + 1) * ncols].iter().copied().sum())
            .collect();
        Tensor::new(&[geo.cout], db).expect("bias grad shape")
    });
    let input_grad = need[0].then(|| {
        let mut dcols = vec![T::zero(); geo.k() * ncols];
        T::gemm(geo.k(), geo.cout, ncols, weight.data(), true, &g, false, T::zero(), &mut dcols);
        let mut dx = vec![T::zero(); input.numel()];
        geo.col2im(&dcols, &mut dx);
        Tensor::new(input.shape(), dx).expect("input grad shape")
    });
    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    }
}
