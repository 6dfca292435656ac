//! 2-D convolution (NCHW) via im2col + GEMM, data-parallel over batch items.
//!
//! The backward pass re-runs im2col instead of caching the column matrices:
//! at our activation sizes the cache would cost hundreds of megabytes per
//! step, while recomputation is a small fraction of the GEMM time.

use crate::exec;
use crate::nn::ops::basic::emit;
use crate::nn::tape::{Arr, Var};
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Ix4, IxDyn};

pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        size + 2 * pad >= k,
        "conv: kernel {k} larger than padded input {size}+2·{pad}"
    );
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    x: ArrayView3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let mut dst = cols.row_mut(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let ii = ii as usize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        dst[oi * wo + oj] = x[[c, ii, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: ArrayView2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array3<f64> {
    let mut x = Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = cols.row(row);
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    let ii = ii as usize;
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        x[[c, ii, jj as usize]] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
    x
}

/// Convolution over `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]` and an
/// optional `[Cout]` bias.
pub fn conv2d(x: &Var, w: &Var, b: Option<&Var>, stride: usize, pad: usize) -> Var {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 4, "conv2d: input must be NCHW, got {:?}", xs);
    assert_eq!(ws.len(), 4, "conv2d: weight must be [Cout, Cin, kh, kw]");
    assert_eq!(xs[1], ws[1], "conv2d: channel mismatch {:?} vs {:?}", xs, ws);
    let (n, cin, h, wdt) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);

    let w2d_owned: Array2<f64> = w
        .value()
        .clone()
        .into_shape_with_order((cout, cin * kh * kw))
        .unwrap();
    let xval = x.value();
    let x4 = xval.view().into_dimensionality::<Ix4>().unwrap();

    let items: Vec<Array2<f64>> = exec::map_indexed(n, |i| {
        let cols = im2col(x4.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
        w2d_owned.dot(&cols)
    });
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for (i, item) in items.into_iter().enumerate() {
        let reshaped = item.into_shape_with_order((cout, ho, wo)).unwrap();
        out.index_axis_mut(Axis(0), i).assign(&reshaped);
    }
    let mut out = out.into_dyn();
    if let Some(bias) = b {
        assert_eq!(bias.shape(), [cout], "conv2d: bias must be [Cout]");
        let bv = bias.value();
        for c in 0..cout {
            let add = bv[[c]];
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + add);
        }
    }

    let (xi, wi) = (x.idx(), w.idx());
    let bi = b.and_then(|v| v.idx());
    let (xv_rc, wv_rc) = (x.value_rc(), w.value_rc());
    let inputs: Vec<&Var> = match b {
        Some(bias) => vec![x, w, bias],
        None => vec![x, w],
    };
    emit(&inputs, out, move |g, sink| {
        let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
        let x4 = xv_rc.view().into_dimensionality::<Ix4>().unwrap();
        let w2d: Array2<f64> = wv_rc
            .as_ref()
            .clone()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let need_x = xi.is_some();
        let need_w = wi.is_some();

        if need_x || need_w {
            // One parallel sweep over the batch computes both pieces.
            let parts: Vec<(Option<Array3<f64>>, Option<Array2<f64>>)> =
                exec::map_indexed(n, |i| {
                    let g2: Array2<f64> = g4
                        .index_axis(Axis(0), i)
                        .to_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    let gx_i = need_x.then(|| {
                        let gcols = w2d.t().dot(&g2);
                        col2im(gcols.view(), cin, h, wdt, kh, kw, stride, pad, ho, wo)
                    });
                    let gw_i = need_w.then(|| {
                        let cols =
                            im2col(x4.index_axis(Axis(0), i), kh, kw, stride, pad, ho, wo);
                        g2.dot(&cols.t())
                    });
                    (gx_i, gw_i)
                });

            if need_x {
                let mut gx = Array4::<f64>::zeros((n, cin, h, wdt));
                for (i, (gx_i, _)) in parts.iter().enumerate() {
                    gx.index_axis_mut(Axis(0), i).assign(gx_i.as_ref().unwrap());
                }
                sink.add(xi.unwrap(), gx.into_dyn());
            }
            if need_w {
                let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
                for (_, gw_i) in &parts {
                    gw += gw_i.as_ref().unwrap();
                }
                sink.add(
                    wi.unwrap(),
                    gw.into_shape_with_order((cout, cin, kh, kw))
                        .unwrap()
                        .into_dyn(),
                );
            }
        }
        sink.add_to(bi, || {
            let mut gb = Arr::zeros(IxDyn(&[cout]));
            for c in 0..cout {
                gb[[c]] = g.index_axis(Axis(1), c).sum();
            }
            gb
        });
    })
}

/// Reference convolution used only by tests: direct six-loop evaluation.
pub fn conv2d_naive(x: &Arr, w: &Arr, b: Option<&Arr>, stride: usize, pad: usize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wdt) = x4.dim();
    let (cout, _, kh, kw) = w4.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(wdt, kw, stride, pad);
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = b.map_or(0.0, |bv| bv[[co]]);
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii < 0
                                    || jj < 0
                                    || ii as usize >= h
                                    || jj as usize >= wdt
                                {
                                    continue;
                                }
                                acc += x4[[ni, ci, ii as usize, jj as usize]]
                                    * w4[[co, ci, ki, kj]];
                            }
                        }
                    }
                    out[[ni, co, oi, oj]] = acc;
                }
            }
        }
    }
    out.into_dyn()
}

/// Adaptive average pooling to `(oh, ow)` on a plain array (no gradient).
/// Output cell `(i, j)` averages input rows `[⌊i·H/oh⌋, ⌈(i+1)·H/oh⌉)` and
/// the analogous column span.
pub fn adaptive_avg_pool_values(x: &Arr, oh: usize, ow: usize) -> Arr {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = x4.dim();
    assert!(oh >= 1 && ow >= 1 && h >= 1 && w >= 1);
    let mut out = Array4::<f64>::zeros((n, c, oh, ow));
    let span = |i: usize, o: usize, full: usize| -> (usize, usize) {
        let lo = i * full / o;
        let hi = ((i + 1) * full).div_ceil(o);
        (lo, hi.max(lo + 1))
    };
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                let (r0, r1) = span(oi, oh, h);
                for oj in 0..ow {
                    let (c0, c1) = span(oj, ow, w);
                    let mut s = 0.0;
                    for i in r0..r1 {
                        for j in c0..c1 {
                            s += x4[[ni, ci, i, j]];
                        }
                    }
                    out[[ni, ci, oi, oj]] = s / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_scalar_fn, GRAD_REL_TOL};
    use crate::nn::ops::basic::{mul, sum_all};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
            let x = rand_arr(&mut rng, &[2, 3, 6, 5]);
            let w = rand_arr(&mut rng, &[4, 3, k, k]);
            let b = rand_arr(&mut rng, &[4]);
            let got = conv2d(
                &Var::constant(x.clone()),
                &Var::constant(w.clone()),
                Some(&Var::constant(b.clone())),
                stride,
                pad,
            );
            let want = conv2d_naive(&x, &w, Some(&b), stride, pad);
            let diff = (got.value() - &want).mapv(f64::abs).sum();
            assert!(diff < 1e-12, "stride {stride} pad {pad} k {k}: diff {diff}");
        }
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = rand_arr(&mut rng, &[2, 2, 4, 4]);
        let w = rand_arr(&mut rng, &[3, 2, 3, 3]);
        let b = rand_arr(&mut rng, &[3]);
        let err = check_scalar_fn(&[x, w, b], &|_t, vs| {
            let y = conv2d(&vs[0], &vs[1], Some(&vs[2]), 1, 1);
            sum_all(&mul(&y, &y))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn strided_conv_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_arr(&mut rng, &[1, 2, 5, 5]);
        let w = rand_arr(&mut rng, &[2, 2, 3, 3]);
        let err = check_scalar_fn(&[x, w], &|_t, vs| {
            let y = conv2d(&vs[0], &vs[1], None, 2, 1);
            sum_all(&mul(&y, &y))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn adaptive_pool_uneven_spans_average_correctly() {
        // 1×1×3×3 pooled to 2×2: cell (0,0) covers rows 0..2? No — spans are
        // [0,2) only when ⌈3/2⌉ = 2; check against hand-computed values.
        let x = Arr::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap();
        let p = adaptive_avg_pool_values(&x, 2, 2);
        // span(0, 2, 3) = [0, 2), span(1, 2, 3) = [1, 3)
        assert_eq!(p[[0, 0, 0, 0]], (1. + 2. + 4. + 5.) / 4.);
        assert_eq!(p[[0, 0, 0, 1]], (2. + 3. + 5. + 6.) / 4.);
        assert_eq!(p[[0, 0, 1, 0]], (4. + 5. + 7. + 8.) / 4.);
        assert_eq!(p[[0, 0, 1, 1]], (5. + 6. + 8. + 9.) / 4.);
    }

    #[test]
    fn conv_parallel_and_sequential_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = rand_arr(&mut rng, &[4, 3, 8, 8]);
        let w = rand_arr(&mut rng, &[5, 3, 3, 3]);
        let a = conv2d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, 1, 1);
        let prev = crate::exec::force_sequential(true);
        let b = conv2d(&Var::constant(x), &Var::constant(w), None, 1, 1);
        crate::exec::force_sequential(prev);
        assert_eq!(a.value(), b.value());
    }
}
