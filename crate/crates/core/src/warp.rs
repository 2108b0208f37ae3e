//! Backward warping by a flow field.
//!
//! Flows are target-indexed: `out(p) = src(p - flow(p))`, i.e. each output
//! pixel looks up where its content was in the source image. Sample
//! positions outside the image are clamped to the nearest edge pixel, and
//! the result is bilinear in between pixel centres. The warp is
//! differentiable with respect to both the source values and the flow.

use jant_autograd::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::types::FlowField;

/// Bilinear tap for one output pixel.
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    /// Whether the x / y sample coordinate was inside the image (not clamped).
    free_x: bool,
    free_y: bool,
}

fn axis<T: Scalar>(pos: T, size: usize) -> (usize, usize, T, bool) {
    let hi = T::from_f64((size - 1) as f64);
    let (c, free) = if pos < T::zero() {
        (T::zero(), false)
    } else if pos > hi {
        (hi, false)
    } else {
        (pos, true)
    };
    let i0 = (c.floor().as_f64() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    let a = if i0 == i1 { T::zero() } else { c - T::from_f64(i0 as f64) };
    (i0, i1, a, free)
}

fn tap<T: Scalar>(x: usize, y: usize, u: T, v: T, w: usize, h: usize) -> Tap<T> {
    let (x0, x1, ax, free_x) = axis(T::from_f64(x as f64) - u, w);
    let (y0, y1, ay, free_y) = axis(T::from_f64(y as f64) - v, h);
    Tap {
        x0,
        x1,
        y0,
        y1,
        ax,
        ay,
        free_x,
        free_y,
    }
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    if t == T::zero() {
        a
    } else {
        a * (T::one() - t) + b * t
    }
}

#[inline]
fn sample<T: Scalar>(plane: &[T], w: usize, t: &Tap<T>) -> T {
    let top = lerp(plane[t.y0 * w + t.x0], plane[t.y0 * w + t.x1], t.ax);
    let bot = lerp(plane[t.y1 * w + t.x0], plane[t.y1 * w + t.x1], t.ax);
    lerp(top, bot, t.ay)
}

fn check_shapes<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = src.dims4()?;
    let (fn_, fc, fh, fw) = flow.dims4()?;
    if fn_ != n || fc != 2 || fh != h || fw != w {
        return Err(Error::Dimension(format!(
            "warp: source {:?} vs flow {:?}",
            src.shape(),
            flow.shape()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::Dimension("warp of an empty image".into()));
    }
    Ok((n, c, h, w))
}

/// Warps a batch `src: [N,C,H,W]` by `flow: [N,2,H,W]`.
pub fn warp_tensor<T: Scalar>(src: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = check_shapes(src, flow)?;
    let hw = h * w;
    let mut out = vec![T::zero(); src.numel()];
    for b in 0..n {
        let f = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, f[p], f[hw + p], w, h);
                for ch in 0..c {
                    let plane = &src.data()[(b * c + ch) * hw..][..hw];
                    out[(b * c + ch) * hw + p] = sample(plane, w, &t);
                }
            }
        }
    }
    Ok(Tensor::new(src.shape(), out)?)
}

struct WarpOp;

impl<T: Scalar> CustomOp<T> for WarpOp {
    fn name(&self) -> &'static str {
        "backward_warp"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (src, flow) = (inputs[0], inputs[1]);
        let (n, c, h, w) = src.dims4().expect("checked at forward");
        let hw = h * w;
        let one = T::one();
        let mut dsrc = needs_grad[0].then(|| vec![T::zero(); src.numel()]);
        let mut dflow = needs_grad[1].then(|| vec![T::zero(); flow.numel()]);
        for b in 0..n {
            let f = &flow.data()[b * 2 * hw..(b + 1) * 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let t = tap(x, y, f[p], f[hw + p], w, h);
                    let (mut du, mut dv) = (T::zero(), T::zero());
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let g = grad.data()[base + p];
                        if let Some(ds) = dsrc.as_mut() {
                            let ds = &mut ds[base..base + hw];
                            let w00 = (one - t.ax) * (one - t.ay);
                            let w01 = t.ax * (one - t.ay);
                            let w10 = (one - t.ax) * t.ay;
                            let w11 = t.ax * t.ay;
                            ds[t.y0 * w + t.x0] = ds[t.y0 * w + t.x0] + g * w00;
                            ds[t.y0 * w + t.x1] = ds[t.y0 * w + t.x1] + g * w01;
                            ds[t.y1 * w + t.x0] = ds[t.y1 * w + t.x0] + g * w10;
                            ds[t.y1 * w + t.x1] = ds[t.y1 * w + t.x1] + g * w11;
                        }
                        if dflow.is_some() {
                            let plane = &src.data()[base..base + hw];
                            let s00 = plane[t.y0 * w + t.x0];
                            let s01 = plane[t.y0 * w + t.x1];
                            let s10 = plane[t.y1 * w + t.x0];
                            let s11 = plane[t.y1 * w + t.x1];
                            // d(sample)/d(sample coordinate); the coordinate is p - flow
                            let dsx = (one - t.ay) * (s01 - s00) + t.ay * (s11 - s10);
                            let dsy = (one - t.ax) * (s10 - s00) + t.ax * (s11 - s01);
                            if t.free_x {
                                du = du - g * dsx;
                            }
                            if t.free_y {
                                dv = dv - g * dsy;
                            }
                        }
                    }
                    if let Some(df) = dflow.as_mut() {
                        df[b * 2 * hw + p] = du;
                        df[b * 2 * hw + hw + p] = dv;
                    }
                }
            }
        }
        vec![
            dsrc.map(|d| Tensor::new(src.shape(), d).expect("shape")),
            dflow.map(|d| Tensor::new(flow.shape(), d).expect("shape")),
        ]
    }
}

/// Differentiable warp on the tape.
pub fn warp_var<T: Scalar>(g: &mut Graph<T>, src: Var, flow: Var) -> Result<Var> {
    let out = warp_tensor(g.value(src), g.value(flow))?;
    Ok(g.custom(&[src, flow], out, Box::new(WarpOp)))
}

/// Warps a `[C,H,W]` (or `[1,C,H,W]`) image by a flow field.
pub fn backward_warp(source: &Tensor<f32>, flow: &FlowField) -> Result<Tensor<f32>> {
    let squeeze = source.ndim() == 3;
    let src = if squeeze {
        source.clone().unsqueeze0()
    } else {
        source.clone()
    };
    let (_, _, h, w) = src.dims4()?;
    flow.check_dims(h, w)?;
    let out = warp_tensor(&src, &flow.to_tensor())?;
    if squeeze {
        Ok(out.reshape(source.shape())?)
    } else {
        Ok(out)
    }
}

/// Treats `flow_prev` as a two-channel image and warps it by `carrier`.
pub fn warp_flow(flow_prev: &FlowField, carrier: &FlowField) -> Result<FlowField> {
    carrier.check_dims(flow_prev.height, flow_prev.width)?;
    let out = warp_tensor(&flow_prev.to_tensor::<f32>(), &carrier.to_tensor())?;
    FlowField::from_tensor(&out, 0)
}
