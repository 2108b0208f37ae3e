//! Integer-factor bilinear upsampling, half-pixel (align-corners = false) convention.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per output index: the two source indices and the weight of the second.
pub(crate) fn axis_taps<T: Scalar>(input: usize, factor: usize) -> Vec<(usize, usize, T)> {
    let f = T::from_f64(factor as f64);
    let half = T::from_f64(0.5);
    (0..input * factor)
        .map(|i| {
            let x = (T::from_f64(i as f64) + half) / f - half;
            let x = x.max(T::zero());
            let i0 = (x.floor().as_f64() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i0 == input - 1 { T::zero() } else { x - T::from_f64(i0 as f64) };
            (i0, i1, w)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("upsample input is 4-D");
    let (oh, ow) = (h * factor, w * factor);
    let ty = axis_taps::<T>(h, factor);
    let tx = axis_taps::<T>(w, factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let one = T::one();
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = plane_in[y0 * w + x0] * (one - wx) + plane_in[y0 * w + x1] * wx;
                let bot = plane_in[y1 * w + x0] * (one - wx) + plane_in[y1 * w + x1] * wx;
                plane_out[oy * ow + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out).expect("upsample shape")
}

pub fn upsample_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    factor: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let ty = axis_taps::<T>(h, factor);
    let tx = axis_taps::<T>(w, factor);
    let mut dx = vec![T::zero(); input_shape.iter().product()];
    let one = T::one();
    for (plane_g, plane_dx) in grad_out.data().chunks(oh * ow).zip(dx.chunks_mut(h * w)) {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let g = plane_g[oy * ow + ox];
                let gt = g * (one - wy);
                let gb = g * wy;
                plane_dx[y0 * w + x0] = plane_dx[y0 * w + x0] + gt * (one - wx);
                plane_dx[y0 * w + x1] = plane_dx[y0 * w + x1] + gt * wx;
                plane_dx[y1 * w + x0] = plane_dx[y1 * w + x0] + gb * (one - wx);
                plane_dx[y1 * w + x1] = plane_dx[y1 * w + x1] + gb * wx;
            }
        }
    }
    Tensor::new(input_shape, dx).expect("upsample grad shape")
}
