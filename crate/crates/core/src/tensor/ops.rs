//! Forward and adjoint kernels behind the tape.
//!
//! Convolutions are "same"-size with odd kernels, stride 1, and either
//! periodic or zero padding. Hot loops run over contiguous row segments so
//! the compiler can vectorize them; the per-site accumulation order is fixed
//! (channel, then kernel row, then kernel column) independent of position,
//! which makes periodic convolution exactly translation equivariant.

use crate::error::{FinoError, Result};
use crate::tensor::{PaddingMode, Scalar, Tensor};

/// Up to two contiguous `(dst_start, src_start, len)` segments realizing
/// `dst[i] op= src[i + offset]` under the padding rule.
#[derive(Clone, Copy)]
struct Spans {
    n: usize,
    seg: [(usize, usize, usize); 2],
}

impl Spans {
    #[inline]
    fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.seg[..self.n].iter().copied()
    }
}

#[inline]
fn shifted_spans(width: usize, offset: isize, pad: PaddingMode) -> Spans {
    match pad {
        PaddingMode::Periodic => {
            let s = offset.rem_euclid(width as isize) as usize;
            if s == 0 {
                Spans {
                    n: 1,
                    seg: [(0, 0, width), (0, 0, 0)],
                }
            } else {
                Spans {
                    n: 2,
                    seg: [(0, s, width - s), (width - s, 0, s)],
                }
            }
        }
        PaddingMode::Zero => {
            let dst_start = (-offset).max(0) as usize;
            let dst_end = (width as isize - offset.max(0)) as usize;
            if dst_start >= dst_end.min(width) {
                Spans {
                    n: 0,
                    seg: [(0, 0, 0); 2],
                }
            } else {
                let len = dst_end - dst_start;
                Spans {
                    n: 1,
                    seg: [
                        (dst_start, (dst_start as isize + offset) as usize, len),
                        (0, 0, 0),
                    ],
                }
            }
        }
    }
}

#[inline]
fn wrap_row(h: isize, extent: usize) -> usize {
    h.rem_euclid(extent as isize) as usize
}

fn check_conv_shapes<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    context: &'static str,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, ci, h, w) = input.dims4(context)?;
    let (co, kci, kh, kw) = kernel.dims4(context)?;
    if kci != ci {
        return Err(FinoError::ShapeMismatch {
            context,
            axis: 1,
            expected: ci,
            got: kci,
        });
    }
    if kh % 2 == 0 {
        return Err(FinoError::EvenKernel {
            context,
            axis: 2,
            extent: kh,
        });
    }
    if kw % 2 == 0 {
        return Err(FinoError::EvenKernel {
            context,
            axis: 3,
            extent: kw,
        });
    }
    if bias.shape() != [co] {
        return Err(FinoError::ShapeMismatch {
            context,
            axis: 0,
            expected: co,
            got: bias.numel(),
        });
    }
    let _ = b;
    Ok((b, ci, h, w, kh, kw))
}

/// Same-size convolution: `out[b,o,h,w] = bias[o] + sum_{c,p,q} k[o,c,p,q] * x[b,c,h+p-rh,w+q-rw]`.
pub fn conv2d_forward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: &Tensor<E>,
    pad: PaddingMode,
) -> Result<Tensor<E>> {
    let (b, ci, h, w, kh, kw) = check_conv_shapes(input, kernel, bias, "conv2d")?;
    let co = kernel.shape()[0];
    let (rh, rw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut out = Tensor::<E>::zeros(&[b, co, h, w]);
    let kdata = kernel.data();
    let in_data = input.data();
    let out_data = out.data_mut();

    for bi in 0..b {
        for o in 0..co {
            let bias_o = bias.data()[o];
            let out_plane = &mut out_data[(bi * co + o) * hw..][..hw];
            out_plane.fill(bias_o);
            for c in 0..ci {
                let in_plane = &in_data[(bi * ci + c) * hw..][..hw];
                for p in 0..kh {
                    let dy = p as isize - rh as isize;
                    for q in 0..kw {
                        let coef = kdata[((o * ci + c) * kh + p) * kw + q];
                        if coef == E::zero() {
                            continue;
                        }
                        let dx = q as isize - rw as isize;
                        let spans = shifted_spans(w, dx, pad);
                        for hh in 0..h {
                            let hs = hh as isize + dy;
                            let hs = match pad {
                                PaddingMode::Periodic => wrap_row(hs, h),
                                PaddingMode::Zero => {
                                    if hs < 0 || hs >= h as isize {
                                        continue;
                                    }
                                    hs as usize
                                }
                            };
                            let src_row = &in_plane[hs * w..][..w];
                            let dst_row = &mut out_plane[hh * w..][..w];
                            for (d0, s0, len) in spans.iter() {
                                let dst = &mut dst_row[d0..d0 + len];
                                let src = &src_row[s0..s0 + len];
                                for i in 0..len {
                                    dst[i] += coef * src[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`conv2d_forward`]; each output is computed only when requested.
pub fn conv2d_backward<E: Scalar>(
    input: &Tensor<E>,
    kernel: &Tensor<E>,
    grad_out: &Tensor<E>,
    pad: PaddingMode,
    needs: (bool, bool, bool),
) -> Result<(Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>)> {
    let (b, ci, h, w) = input.dims4("conv2d backward")?;
    let (co, _, kh, kw) = kernel.dims4("conv2d backward")?;
    let (rh, rw) = (kh / 2, kw / 2);
    let kdata = kernel.data();

    let grad_bias = if needs.2 {
        let mut gb = Tensor::<E>::zeros(&[co]);
        for bi in 0..b {
            for o in 0..co {
                let mut acc = E::zero();
                for v in grad_out.plane(bi, o) {
                    acc += *v;
                }
                gb.data_mut()[o] += acc;
            }
        }
        Some(gb)
    } else {
        None
    };

    let grad_kernel = if needs.1 {
        let mut gk = Tensor::<E>::zeros(&[co, ci, kh, kw]);
        for bi in 0..b {
            for o in 0..co {
                let g_plane = grad_out.plane(bi, o);
                for c in 0..ci {
                    let in_plane = input.plane(bi, c);
                    for p in 0..kh {
                        let dy = p as isize - rh as isize;
                        for q in 0..kw {
                            let dx = q as isize - rw as isize;
                            let spans = shifted_spans(w, dx, pad);
                            let mut acc = E::zero();
                            for hh in 0..h {
                                let hs = hh as isize + dy;
                                let hs = match pad {
                                    PaddingMode::Periodic => wrap_row(hs, h),
                                    PaddingMode::Zero => {
                                        if hs < 0 || hs >= h as isize {
                                            continue;
                                        }
                                        hs as usize
                                    }
                                };
                                let src_row = &in_plane[hs * w..][..w];
                                let g_row = &g_plane[hh * w..][..w];
                                for (d0, s0, len) in spans.iter() {
                                    let gseg = &g_row[d0..d0 + len];
                                    let sseg = &src_row[s0..s0 + len];
                                    for i in 0..len {
                                        acc += gseg[i] * sseg[i];
                                    }
                                }
                            }
                            gk.data_mut()[((o * ci + c) * kh + p) * kw + q] += acc;
                        }
                    }
                }
            }
        }
        Some(gk)
    } else {
        None
    };

    let grad_input = if needs.0 {
        let mut gx = Tensor::<E>::zeros(&[b, ci, h, w]);
        let hw = h * w;
        let g_data = grad_out.data();
        let gx_data = gx.data_mut();
        for bi in 0..b {
            for c in 0..ci {
                let gx_plane = &mut gx_data[(bi * ci + c) * hw..][..hw];
                for o in 0..co {
                    let g_plane = &g_data[(bi * co + o) * hw..][..hw];
                    for p in 0..kh {
                        let dy = p as isize - rh as isize;
                        for q in 0..kw {
                            let coef = kdata[((o * ci + c) * kh + p) * kw + q];
                            if coef == E::zero() {
                                continue;
                            }
                            let dx = q as isize - rw as isize;
                            // d x[hs, ws] receives k * g[hs - dy, ws - dx].
                            let spans = shifted_spans(w, -dx, pad);
                            for hh in 0..h {
                                let hs = hh as isize - dy;
                                let hs = match pad {
                                    PaddingMode::Periodic => wrap_row(hs, h),
                                    PaddingMode::Zero => {
                                        if hs < 0 || hs >= h as isize {
                                            continue;
                                        }
                                        hs as usize
                                    }
                                };
                                let g_row = &g_plane[hs * w..][..w];
                                let dst_row = &mut gx_plane[hh * w..][..w];
                                for (d0, s0, len) in spans.iter() {
                                    let dst = &mut dst_row[d0..d0 + len];
                                    let src = &g_row[s0..s0 + len];
                                    for i in 0..len {
                                        dst[i] += coef * src[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Some(gx)
    } else {
        None
    };

    Ok((grad_input, grad_kernel, grad_bias))
}

pub fn relu_forward<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.clone();
    out.requires_grad = false;
    for v in out.data_mut() {
        if *v < E::zero() {
            *v = E::zero();
        }
    }
    out
}

pub fn relu_backward<E: Scalar>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut gx = Tensor::<E>::zeros(x.shape());
    for ((g, xv), o) in gx
        .data_mut()
        .iter_mut()
        .zip(x.data().iter())
        .zip(grad_out.data().iter())
    {
        if *xv > E::zero() {
            *g = *o;
        }
    }
    gx
}

/// Numerically stable logistic function; saturates cleanly for large |x|.
#[inline]
pub fn sigmoid_scalar<E: Scalar>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::one() + e)
    }
}

pub fn sigmoid_forward<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.clone();
    out.requires_grad = false;
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

pub fn sigmoid_backward<E: Scalar>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut gx = Tensor::<E>::zeros(y.shape());
    for ((g, yv), o) in gx
        .data_mut()
        .iter_mut()
        .zip(y.data().iter())
        .zip(grad_out.data().iter())
    {
        *g = *o * *yv * (E::one() - *yv);
    }
    gx
}

pub fn exp_forward<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let mut out = x.clone();
    out.requires_grad = false;
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}

pub fn exp_backward<E: Scalar>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut gx = Tensor::<E>::zeros(y.shape());
    for ((g, yv), o) in gx
        .data_mut()
        .iter_mut()
        .zip(y.data().iter())
        .zip(grad_out.data().iter())
    {
        *g = *o * *yv;
    }
    gx
}

/// Mean pooling with per-axis factors in {1, 2}; pooled axes must be even.
pub fn avg_pool_forward<E: Scalar>(
    x: &Tensor<E>,
    fh: usize,
    fw: usize,
) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4("avg_pool")?;
    for (axis, (extent, f)) in [(h, fh), (w, fw)].iter().enumerate() {
        if !matches!(*f, 1 | 2) {
            return Err(FinoError::InvalidArgument(format!(
                "avg_pool factor on axis {} must be 1 or 2, got {f}",
                axis + 2
            )));
        }
        if *f == 2 && extent % 2 != 0 {
            return Err(FinoError::OddPoolExtent {
                context: "avg_pool",
                axis: axis + 2,
                extent: *extent,
            });
        }
    }
    let (oh, ow) = (h / fh, w / fw);
    let inv = crate::tensor::scalar::<E>(1.0 / (fh * fw) as f64);
    let mut out = Tensor::<E>::zeros(&[b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for hh in 0..oh {
                for ww in 0..ow {
                    let mut acc = E::zero();
                    for dy in 0..fh {
                        for dx in 0..fw {
                            acc += src[(hh * fh + dy) * w + ww * fw + dx];
                        }
                    }
                    dst[hh * ow + ww] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    in_shape: &[usize],
    fh: usize,
    fw: usize,
) -> Tensor<E> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / fh, w / fw);
    let inv = crate::tensor::scalar::<E>(1.0 / (fh * fw) as f64);
    let mut gx = Tensor::<E>::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let dst = gx.plane_mut(bi, ci);
            for hh in 0..oh {
                for ww in 0..ow {
                    let gv = g[hh * ow + ww] * inv;
                    for dy in 0..fh {
                        for dx in 0..fw {
                            dst[(hh * fh + dy) * w + ww * fw + dx] += gv;
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor upsampling with per-axis factors in {1, 2}.
pub fn upsample_forward<E: Scalar>(x: &Tensor<E>, fh: usize, fw: usize) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4("upsample")?;
    if !matches!(fh, 1 | 2) || !matches!(fw, 1 | 2) {
        return Err(FinoError::InvalidArgument(format!(
            "upsample factors must be 1 or 2, got ({fh}, {fw})"
        )));
    }
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Tensor::<E>::zeros(&[b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            let src = x.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for hh in 0..oh {
                let src_row = &src[(hh / fh) * w..][..w];
                let dst_row = &mut dst[hh * ow..][..ow];
                for ww in 0..ow {
                    dst_row[ww] = src_row[ww / fw];
                }
            }
        }
    }
    Ok(out)
}

pub fn upsample_backward<E: Scalar>(
    grad_out: &Tensor<E>,
    in_shape: &[usize],
    fh: usize,
    fw: usize,
) -> Tensor<E> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ow = w * fw;
    let mut gx = Tensor::<E>::zeros(in_shape);
    for bi in 0..b {
        for ci in 0..c {
            let g = grad_out.plane(bi, ci);
            let dst = gx.plane_mut(bi, ci);
            for hh in 0..h * fh {
                let g_row = &g[hh * ow..][..ow];
                let dst_row = &mut dst[(hh / fh) * w..][..w];
                for ww in 0..ow {
                    dst_row[ww / fw] += g_row[ww];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_tensor(values: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 1, values.len()], values).unwrap()
    }

    #[test]
    fn conv_second_difference_zero_pad_matches_hand_sums() {
        // Direct summation over each window, frozen by hand.
        let x = row_tensor(&[0.0, 1.0, 4.0, 9.0, 16.0]);
        let k = Tensor::from_f64(&[1, 1, 1, 3], &[1.0, -2.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, PaddingMode::Zero).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 2.0, -23.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = row_tensor(&[3.0, -1.5, 0.25, 7.0]);
        let k = Tensor::from_f64(&[1, 1, 1, 1], &[1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, PaddingMode::Zero).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn second_difference_annihilates_constants_under_wrap() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 8], 2.75);
        let k = Tensor::from_f64(&[1, 1, 1, 3], &[1.0, -2.0, 1.0]).unwrap();
        let b = Tensor::<f64>::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, PaddingMode::Periodic).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-14));
    }

    #[test]
    fn even_kernel_extent_rejected() {
        let x = row_tensor(&[0.0; 4]);
        let k = Tensor::<f64>::zeros(&[1, 1, 1, 2]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(
            conv2d_forward(&x, &k, &b, PaddingMode::Zero),
            Err(FinoError::EvenKernel { axis: 3, .. })
        ));
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 1, 4]);
        let k = Tensor::<f64>::zeros(&[1, 3, 1, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        match conv2d_forward(&x, &k, &b, PaddingMode::Zero) {
            Err(FinoError::ShapeMismatch { axis: 1, .. }) => {}
            other => panic!("expected channel mismatch, got {other:?}"),
        }
    }

    #[test]
    fn zero_pad_conv_of_zeros_is_broadcast_bias() {
        let x = Tensor::<f64>::zeros(&[2, 3, 4, 4]);
        let k = Tensor::<f64>::full(&[2, 3, 3, 3], 0.37);
        let b = Tensor::from_f64(&[2], &[1.25, -0.5]).unwrap();
        let y = conv2d_forward(&x, &k, &b, PaddingMode::Zero).unwrap();
        for bi in 0..2 {
            assert!(y.plane(bi, 0).iter().all(|&v| v == 1.25));
            assert!(y.plane(bi, 1).iter().all(|&v| v == -0.5));
        }
    }

    #[test]
    fn pool_2x2_block_mean() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = avg_pool_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 2.5);
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(
            avg_pool_forward(&x, 2, 2),
            Err(FinoError::OddPoolExtent { axis: 2, .. })
        ));
    }

    #[test]
    fn pool_conserves_sum_times_factor() {
        let vals: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = Tensor::<f64>::from_f64(&[1, 1, 4, 8], &vals).unwrap();
        let y = avg_pool_forward(&x, 2, 2).unwrap();
        let sx: f64 = x.data().iter().sum();
        let sy: f64 = y.data().iter().sum();
        assert!((sy * 4.0 - sx).abs() < 1e-12);
    }

    #[test]
    fn upsample_replicates_blocks() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 1], &[5.0]).unwrap();
        let y = upsample_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn pool_after_upsample_is_identity() {
        let vals: Vec<f64> = (0..48).map(|i| (i as f64).cos()).collect();
        let x = Tensor::<f64>::from_f64(&[2, 2, 3, 4], &vals).unwrap();
        let y = avg_pool_forward(&upsample_forward(&x, 2, 2).unwrap(), 2, 2).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn upsample_shape_contract() {
        let x = Tensor::<f64>::zeros(&[3, 2, 4, 4]);
        let y = upsample_forward(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[3, 2, 8, 8]);
    }

    #[test]
    fn relu_definition() {
        let x = row_tensor(&[-1.0, 0.0, 2.0]);
        let y = relu_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_midpoint_symmetry_and_saturation() {
        let x = row_tensor(&[0.0, 3.7, -3.7, 50.0, -50.0]);
        let y = sigmoid_forward(&x);
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] + y.data()[2] - 1.0).abs() < 1e-15);
        assert!(y.data()[3] <= 1.0 && y.data()[3] > 1.0 - 1e-15);
        assert!(y.data()[4] >= 0.0 && y.data()[4] < 1e-15);
        assert!(y.is_finite());
    }
}
