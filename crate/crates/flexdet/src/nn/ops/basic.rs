//! Elementwise arithmetic, activations, reductions, and shape surgery.

use crate::nn::tape::{Arr, GradSink, Var};
use ndarray::{Axis, IxDyn, Slice};

/// Record-or-constant helper shared by every op in this module.
pub(crate) fn emit(
    inputs: &[&Var],
    out: Arr,
    back: impl FnOnce(&Arr, &mut GradSink) + 'static,
) -> Var {
    match Var::recording_tape(inputs) {
        Some(tape) => tape.record(out, Box::new(back)),
        None => Var::constant(out),
    }
}

fn assert_same_shape(op: &str, a: &Var, b: &Var) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_same_shape("add", a, b);
    let out = a.value() + b.value();
    let (ai, bi) = (a.idx(), b.idx());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || g.clone());
        sink.add_to(bi, || g.clone());
    })
}

pub fn sub(a: &Var, b: &Var) -> Var {
    assert_same_shape("sub", a, b);
    let out = a.value() - b.value();
    let (ai, bi) = (a.idx(), b.idx());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || g.clone());
        sink.add_to(bi, || g.mapv(|v| -v));
    })
}

pub fn mul(a: &Var, b: &Var) -> Var {
    assert_same_shape("mul", a, b);
    let out = a.value() * b.value();
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || g * &*bv);
        sink.add_to(bi, || g * &*av);
    })
}

pub fn div(a: &Var, b: &Var) -> Var {
    assert_same_shape("div", a, b);
    let out = a.value() / b.value();
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || g / &*bv);
        sink.add_to(bi, || {
            let mut gb = g * &*av;
            gb.zip_mut_with(&bv, |x, &den| *x = -*x / (den * den));
            gb
        });
    })
}

pub fn scale(x: &Var, c: f64) -> Var {
    let out = x.value().mapv(|v| v * c);
    let xi = x.idx();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || g.mapv(|v| v * c));
    })
}

pub fn add_scalar(x: &Var, c: f64) -> Var {
    let out = x.value().mapv(|v| v + c);
    let xi = x.idx();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || g.clone());
    })
}

/// Elementwise maximum; ties route the gradient to `a`.
pub fn max_elem(a: &Var, b: &Var) -> Var {
    assert_same_shape("max_elem", a, b);
    let mut out = a.value().clone();
    out.zip_mut_with(b.value(), |x, &y| {
        if y > *x {
            *x = y;
        }
    });
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || {
            let mut ga = g.clone();
            ga.zip_mut_with(&(&*av - &*bv), |x, &d| {
                if d < 0.0 {
                    *x = 0.0;
                }
            });
            ga
        });
        sink.add_to(bi, || {
            let mut gb = g.clone();
            gb.zip_mut_with(&(&*av - &*bv), |x, &d| {
                if d >= 0.0 {
                    *x = 0.0;
                }
            });
            gb
        });
    })
}

/// Elementwise minimum; ties route the gradient to `a`.
pub fn min_elem(a: &Var, b: &Var) -> Var {
    assert_same_shape("min_elem", a, b);
    let mut out = a.value().clone();
    out.zip_mut_with(b.value(), |x, &y| {
        if y < *x {
            *x = y;
        }
    });
    let (ai, bi) = (a.idx(), b.idx());
    let (av, bv) = (a.value_rc(), b.value_rc());
    emit(&[a, b], out, move |g, sink| {
        sink.add_to(ai, || {
            let mut ga = g.clone();
            ga.zip_mut_with(&(&*av - &*bv), |x, &d| {
                if d > 0.0 {
                    *x = 0.0;
                }
            });
            ga
        });
        sink.add_to(bi, || {
            let mut gb = g.clone();
            gb.zip_mut_with(&(&*av - &*bv), |x, &d| {
                if d <= 0.0 {
                    *x = 0.0;
                }
            });
            gb
        });
    })
}

/// `max(x, c)`; gradient is zero at and below the clamp.
pub fn clamp_min(x: &Var, c: f64) -> Var {
    let out = x.value().mapv(|v| v.max(c));
    let xi = x.idx();
    let xv = x.value_rc();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                if v <= c {
                    *gv = 0.0;
                }
            });
            gx
        });
    })
}

pub fn sigmoid(x: &Var) -> Var {
    let out = x.value().mapv(stable_sigmoid);
    let xi = x.idx();
    let ov = out.clone();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = g.clone();
            gx.zip_mut_with(&ov, |gv, &s| *gv *= s * (1.0 - s));
            gx
        });
    })
}

/// x · sigmoid(x).
pub fn silu(x: &Var) -> Var {
    let out = x.value().mapv(|v| v * stable_sigmoid(v));
    let xi = x.idx();
    let xv = x.value_rc();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| {
                let s = stable_sigmoid(v);
                *gv *= s * (1.0 + v * (1.0 - s));
            });
            gx
        });
    })
}

pub fn atan(x: &Var) -> Var {
    let out = x.value().mapv(f64::atan);
    let xi = x.idx();
    let xv = x.value_rc();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = g.clone();
            gx.zip_mut_with(&xv, |gv, &v| *gv /= 1.0 + v * v);
            gx
        });
    })
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sum of all elements, shape `[1]`.
pub fn sum_all(x: &Var) -> Var {
    let out = Arr::from_elem(IxDyn(&[1]), x.value().sum());
    let xi = x.idx();
    let shape = x.shape().to_vec();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || Arr::from_elem(IxDyn(&shape), g[[0]]));
    })
}

/// Mean of all elements, shape `[1]`.
pub fn mean_all(x: &Var) -> Var {
    let n = x.value().len() as f64;
    let out = Arr::from_elem(IxDyn(&[1]), x.value().sum() / n);
    let xi = x.idx();
    let shape = x.shape().to_vec();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || Arr::from_elem(IxDyn(&shape), g[[0]] / n));
    })
}

pub fn reshape(x: &Var, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    assert_eq!(
        x.value().len(),
        n,
        "reshape: cannot view {:?} as {:?}",
        x.shape(),
        shape
    );
    let out = reshaped(x.value(), shape);
    let xi = x.idx();
    let in_shape = x.shape().to_vec();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || reshaped(g, &in_shape));
    })
}

/// Reshape regardless of the source's memory layout (copies when the data is
/// not contiguous in standard order, e.g. after an interior-axis concat).
fn reshaped(v: &Arr, shape: &[usize]) -> Arr {
    match v.clone().into_shape_with_order(IxDyn(shape)) {
        Ok(a) => a,
        Err(_) => v
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element counts match"),
    }
}

/// Reorder axes; gradient applies the inverse permutation.
pub fn permute(x: &Var, axes: &[usize]) -> Var {
    assert_eq!(axes.len(), x.shape().len(), "permute: rank mismatch");
    let out = x
        .value()
        .view()
        .permuted_axes(IxDyn(axes))
        .as_standard_layout()
        .to_owned();
    let xi = x.idx();
    let mut inverse = vec![0usize; axes.len()];
    for (to, &from) in axes.iter().enumerate() {
        inverse[from] = to;
    }
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            g.view()
                .permuted_axes(IxDyn(&inverse))
                .as_standard_layout()
                .to_owned()
        });
    })
}

/// Concatenate along `axis`; gradient splits back by the input extents.
pub fn concat(axis: usize, parts: &[&Var]) -> Var {
    assert!(!parts.is_empty(), "concat: no inputs");
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
    // Interior-axis concatenation yields permuted strides; keep every node's
    // value in standard layout so fused kernels can take slices.
    let out = if out.is_standard_layout() {
        out
    } else {
        out.as_standard_layout().to_owned()
    };
    let idxs: Vec<Option<usize>> = parts.iter().map(|p| p.idx()).collect();
    let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    emit(parts, out, move |g, sink| {
        let mut offset = 0;
        for (pi, ext) in idxs.iter().zip(&extents) {
            let (start, end) = (offset, offset + ext);
            sink.add_to(*pi, || {
                g.slice_axis(Axis(axis), Slice::from(start..end)).to_owned()
            });
            offset = end;
        }
    })
}

/// Slice `[from, to)` along `axis`; gradient zero-pads back.
pub fn slice_axis(x: &Var, axis: usize, from: usize, to: usize) -> Var {
    assert!(
        from < to && to <= x.shape()[axis],
        "slice_axis: [{from}, {to}) out of range for axis {axis} of {:?}",
        x.shape()
    );
    let out = x
        .value()
        .slice_axis(Axis(axis), Slice::from(from..to))
        .to_owned();
    let xi = x.idx();
    let in_shape = x.shape().to_vec();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = Arr::zeros(IxDyn(&in_shape));
            gx.slice_axis_mut(Axis(axis), Slice::from(from..to))
                .assign(g);
            gx
        });
    })
}

/// Select rows along axis 0 (repetition allowed); gradient scatter-adds.
pub fn gather_rows(x: &Var, rows: &[usize]) -> Var {
    let n = x.shape()[0];
    for &r in rows {
        assert!(r < n, "gather_rows: row {r} out of range (n = {n})");
    }
    let out = x.value().select(Axis(0), rows);
    let xi = x.idx();
    let rows = rows.to_vec();
    let in_shape = x.shape().to_vec();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = Arr::zeros(IxDyn(&in_shape));
            for (i, &r) in rows.iter().enumerate() {
                let gi = g.index_axis(Axis(0), i);
                let mut dst = gx.index_axis_mut(Axis(0), r);
                dst += &gi;
            }
            gx
        });
    })
}

/// Nearest-neighbour 2× upsampling on NCHW.
pub fn upsample_nearest_2x(x: &Var) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "upsample_nearest_2x: expected NCHW");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let xv = x.value();
    let mut out = Arr::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = xv[[ni, ci, i, j]];
                    out[[ni, ci, 2 * i, 2 * j]] = v;
                    out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    let xi = x.idx();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = Arr::zeros(IxDyn(&[n, c, h, w]));
            for ni in 0..n {
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[[ni, ci, i, j]] = g[[ni, ci, 2 * i, 2 * j]]
                                + g[[ni, ci, 2 * i, 2 * j + 1]]
                                + g[[ni, ci, 2 * i + 1, 2 * j]]
                                + g[[ni, ci, 2 * i + 1, 2 * j + 1]];
                        }
                    }
                }
            }
            gx
        });
    })
}

/// NCHW → `[N, C]` spatial mean.
pub fn global_avg_pool(x: &Var) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "global_avg_pool: expected NCHW");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let area = (h * w) as f64;
    let xv = x.value();
    let mut out = Arr::zeros(IxDyn(&[n, c]));
    for ni in 0..n {
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += xv[[ni, ci, i, j]];
                }
            }
            out[[ni, ci]] = s / area;
        }
    }
    let xi = x.idx();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = Arr::zeros(IxDyn(&[n, c, h, w]));
            for ni in 0..n {
                for ci in 0..c {
                    let gv = g[[ni, ci]] / area;
                    for i in 0..h {
                        for j in 0..w {
                            gx[[ni, ci, i, j]] = gv;
                        }
                    }
                }
            }
            gx
        });
    })
}

/// Broadcast-add a `[C]` bias over NCHW channels.
pub fn add_channel(x: &Var, b: &Var) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "add_channel: expected NCHW");
    let c = sh[1];
    assert_eq!(b.shape(), [c], "add_channel: bias must be [C]");
    let bv = b.value();
    let mut out = x.value().clone();
    for ci in 0..c {
        let bias = bv[[ci]];
        out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v + bias);
    }
    let (xi, bi) = (x.idx(), b.idx());
    emit(&[x, b], out, move |g, sink| {
        sink.add_to(xi, || g.clone());
        sink.add_to(bi, || {
            let mut gb = Arr::zeros(IxDyn(&[c]));
            for ci in 0..c {
                gb[[ci]] = g.index_axis(Axis(1), ci).sum();
            }
            gb
        });
    })
}

/// Broadcast-multiply a `[C]` scale over NCHW channels.
pub fn mul_channel(x: &Var, s: &Var) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "mul_channel: expected NCHW");
    let c = sh[1];
    assert_eq!(s.shape(), [c], "mul_channel: scale must be [C]");
    let sv = s.value();
    let mut out = x.value().clone();
    for ci in 0..c {
        let k = sv[[ci]];
        out.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * k);
    }
    let (xi, si) = (x.idx(), s.idx());
    let (xv, sv_rc) = (x.value_rc(), s.value_rc());
    emit(&[x, s], out, move |g, sink| {
        sink.add_to(xi, || {
            let mut gx = g.clone();
            for ci in 0..c {
                let k = sv_rc[[ci]];
                gx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * k);
            }
            gx
        });
        sink.add_to(si, || {
            let mut gs = Arr::zeros(IxDyn(&[c]));
            for ci in 0..c {
                gs[[ci]] = (&g.index_axis(Axis(1), ci) * &xv.index_axis(Axis(1), ci)).sum();
            }
            gs
        });
    })
}

/// Broadcast-add a `[D]` bias over the rows of `[N, D]`.
pub fn add_rows(x: &Var, b: &Var) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 2, "add_rows: expected [N, D]");
    let d = sh[1];
    assert_eq!(b.shape(), [d], "add_rows: bias must be [D]");
    let mut out = x.value().clone();
    let bv = b.value();
    for mut row in out.rows_mut() {
        for (v, bj) in row.iter_mut().zip(bv.iter()) {
            *v += bj;
        }
    }
    let (xi, bi) = (x.idx(), b.idx());
    emit(&[x, b], out, move |g, sink| {
        sink.add_to(xi, || g.clone());
        sink.add_to(bi, || g.sum_axis(Axis(0)).into_dyn());
    })
}
