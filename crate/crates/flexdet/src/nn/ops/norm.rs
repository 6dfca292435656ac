//! Normalization ops: batch norm (train/eval), layer norm, softmax,
//! row-wise ℓ2 normalization. All have fused hand-derived backward passes.

use crate::nn::ops::basic::emit;
use crate::nn::tape::{Arr, Var};
use ndarray::{Axis, IxDyn};
use std::rc::Rc;

/// Per-channel statistics of one batch-norm training forward, for updating
/// running estimates. `var` is the unbiased estimate.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch norm over NCHW. Normalizes with the biased batch
/// variance, returns the unbiased variance in `BatchStats` for running-stat
/// updates. Gradients flow through the batch statistics.
pub fn bn_train(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> (Var, BatchStats) {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "bn_train: expected NCHW");
    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    assert_eq!(gamma.shape(), [c], "bn_train: gamma must be [C]");
    assert_eq!(beta.shape(), [c], "bn_train: beta must be [C]");
    let m = (n * h * w) as f64;

    let xv = x.value();
    let mut mean = vec![0.0f64; c];
    let mut var_b = vec![0.0f64; c];
    for ci in 0..c {
        let ch = xv.index_axis(Axis(1), ci);
        let mu = ch.sum() / m;
        let mut vs = 0.0;
        for &v in ch.iter() {
            let d = v - mu;
            vs += d * d;
        }
        mean[ci] = mu;
        var_b[ci] = vs / m;
    }
    let inv_std: Vec<f64> = var_b.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let mut x_hat = xv.clone();
    for ci in 0..c {
        let (mu, is) = (mean[ci], inv_std[ci]);
        x_hat
            .index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| (v - mu) * is);
    }
    let gv = gamma.value();
    let bv = beta.value();
    let mut out = x_hat.clone();
    for ci in 0..c {
        let (ga, be) = (gv[[ci]], bv[[ci]]);
        out.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| v * ga + be);
    }

    let stats = BatchStats {
        mean: mean.clone(),
        var: var_b
            .iter()
            .map(|&v| if m > 1.0 { v * m / (m - 1.0) } else { v })
            .collect(),
    };

    let (xi, gi, bi) = (x.idx(), gamma.idx(), beta.idx());
    let x_hat_rc = Rc::new(x_hat);
    let gamma_rc = gamma.value_rc();
    let var = emit(&[x, gamma, beta], out, move |g, sink| {
        // Per channel: dβ = Σg, dγ = Σg·x̂,
        // dx = γ·inv_std·(g − Σg/m − x̂·(Σg·x̂)/m).
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for ci in 0..c {
            let gc = g.index_axis(Axis(1), ci);
            let xc = x_hat_rc.index_axis(Axis(1), ci);
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for (&gvv, &xvv) in gc.iter().zip(xc.iter()) {
                sg += gvv;
                sgx += gvv * xvv;
            }
            sum_g[ci] = sg;
            sum_gx[ci] = sgx;
        }
        sink.add_to(bi, || {
            Arr::from_shape_vec(IxDyn(&[c]), sum_g.clone()).unwrap()
        });
        sink.add_to(gi, || {
            Arr::from_shape_vec(IxDyn(&[c]), sum_gx.clone()).unwrap()
        });
        sink.add_to(xi, || {
            let mut gx = g.clone();
            for ci in 0..c {
                let k = gamma_rc[[ci]] * inv_std[ci];
                let (mg, mgx) = (sum_g[ci] / m, sum_gx[ci] / m);
                let xc = x_hat_rc.index_axis(Axis(1), ci);
                let mut gxc = gx.index_axis_mut(Axis(1), ci);
                for (gvv, &xvv) in gxc.iter_mut().zip(xc.iter()) {
                    *gvv = k * (*gvv - mg - xvv * mgx);
                }
            }
            gx
        });
    });
    (var, stats)
}

/// Evaluation-mode batch norm: normalizes with fixed running statistics.
/// Gradients still flow to x, gamma, beta (the statistics are constants).
pub fn bn_eval(x: &Var, gamma: &Var, beta: &Var, rm: &[f64], rv: &[f64], eps: f64) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "bn_eval: expected NCHW");
    let c = sh[1];
    assert_eq!(gamma.shape(), [c]);
    assert_eq!(beta.shape(), [c]);
    assert!(rm.len() == c && rv.len() == c, "bn_eval: stats must be [C]");

    let a: Vec<f64> = rv.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = x.value().clone();
    for ci in 0..c {
        let (mu, ai) = (rm[ci], a[ci]);
        x_hat
            .index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| (v - mu) * ai);
    }
    let gv = gamma.value();
    let bv = beta.value();
    let mut out = x_hat.clone();
    for ci in 0..c {
        let (ga, be) = (gv[[ci]], bv[[ci]]);
        out.index_axis_mut(Axis(1), ci)
            .mapv_inplace(|v| v * ga + be);
    }

    let (xi, gi, bi) = (x.idx(), gamma.idx(), beta.idx());
    let x_hat_rc = Rc::new(x_hat);
    let gamma_rc = gamma.value_rc();
    emit(&[x, gamma, beta], out, move |g, sink| {
        sink.add_to(bi, || {
            let mut gb = Arr::zeros(IxDyn(&[c]));
            for ci in 0..c {
                gb[[ci]] = g.index_axis(Axis(1), ci).sum();
            }
            gb
        });
        sink.add_to(gi, || {
            let mut gg = Arr::zeros(IxDyn(&[c]));
            for ci in 0..c {
                gg[[ci]] = (&g.index_axis(Axis(1), ci) * &x_hat_rc.index_axis(Axis(1), ci)).sum();
            }
            gg
        });
        sink.add_to(xi, || {
            let mut gx = g.clone();
            for ci in 0..c {
                let k = gamma_rc[[ci]] * a[ci];
                gx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * k);
            }
            gx
        });
    })
}

/// Layer norm over the last axis of any-rank input.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Var {
    let sh = x.shape().to_vec();
    let d = *sh.last().expect("layer_norm: rank ≥ 1");
    assert_eq!(gamma.shape(), [d], "layer_norm: gamma must be [D]");
    assert_eq!(beta.shape(), [d], "layer_norm: beta must be [D]");
    let rows = x.value().len() / d;

    let xs = x.value().as_slice().expect("standard layout").to_vec();
    let mut x_hat = vec![0.0f64; xs.len()];
    let mut inv_std = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            x_hat[r * d + j] = (row[j] - mu) * is;
        }
    }
    let gv = gamma.value().as_slice().unwrap().to_vec();
    let bv = beta.value().as_slice().unwrap().to_vec();
    let mut out = vec![0.0f64; xs.len()];
    for r in 0..rows {
        for j in 0..d {
            out[r * d + j] = x_hat[r * d + j] * gv[j] + bv[j];
        }
    }
    let out = Arr::from_shape_vec(IxDyn(&sh), out).unwrap();

    let (xi, gi, bi) = (x.idx(), gamma.idx(), beta.idx());
    let x_hat_rc = Rc::new(x_hat);
    emit(&[x, gamma, beta], out, move |g, sink| {
        let gs = g.as_slice().expect("standard layout");
        sink.add_to(bi, || {
            let mut gb = vec![0.0f64; d];
            for r in 0..rows {
                for j in 0..d {
                    gb[j] += gs[r * d + j];
                }
            }
            Arr::from_shape_vec(IxDyn(&[d]), gb).unwrap()
        });
        sink.add_to(gi, || {
            let mut gg = vec![0.0f64; d];
            for r in 0..rows {
                for j in 0..d {
                    gg[j] += gs[r * d + j] * x_hat_rc[r * d + j];
                }
            }
            Arr::from_shape_vec(IxDyn(&[d]), gg).unwrap()
        });
        sink.add_to(xi, || {
            // dx = inv_std·(ĝ − mean(ĝ) − x̂·mean(ĝ⊙x̂)), ĝ = g⊙γ per row.
            let mut gx = vec![0.0f64; gs.len()];
            for r in 0..rows {
                let mut mg = 0.0;
                let mut mgx = 0.0;
                for j in 0..d {
                    let gh = gs[r * d + j] * gv[j];
                    mg += gh;
                    mgx += gh * x_hat_rc[r * d + j];
                }
                mg /= d as f64;
                mgx /= d as f64;
                for j in 0..d {
                    let gh = gs[r * d + j] * gv[j];
                    gx[r * d + j] = inv_std[r] * (gh - mg - x_hat_rc[r * d + j] * mgx);
                }
            }
            Arr::from_shape_vec(IxDyn(g.shape()), gx).unwrap()
        });
    })
}

/// Softmax over the last axis of any-rank input.
pub fn softmax_lastdim(x: &Var) -> Var {
    let sh = x.shape().to_vec();
    let d = *sh.last().expect("softmax: rank ≥ 1");
    let rows = x.value().len() / d;
    let xs = x.value().as_slice().expect("standard layout");
    let mut out = vec![0.0f64; xs.len()];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..d {
            let e = (row[j] - mx).exp();
            out[r * d + j] = e;
            z += e;
        }
        for j in 0..d {
            out[r * d + j] /= z;
        }
    }
    let out = Arr::from_shape_vec(IxDyn(&sh), out).unwrap();
    let xi = x.idx();
    let p_rc = Rc::new(out.clone());
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            let gs = g.as_slice().expect("standard layout");
            let ps = p_rc.as_slice().unwrap();
            let mut gx = vec![0.0f64; gs.len()];
            for r in 0..rows {
                let mut dot = 0.0;
                for j in 0..d {
                    dot += gs[r * d + j] * ps[r * d + j];
                }
                for j in 0..d {
                    gx[r * d + j] = ps[r * d + j] * (gs[r * d + j] - dot);
                }
            }
            Arr::from_shape_vec(IxDyn(g.shape()), gx).unwrap()
        });
    })
}

/// ℓ2-normalize each row of `[N, D]`: y = x / √(‖x‖² + eps).
pub fn normalize_rows(x: &Var, eps: f64) -> Var {
    let sh = x.shape();
    assert_eq!(sh.len(), 2, "normalize_rows: expected [N, D]");
    let (n, d) = (sh[0], sh[1]);
    let xs = x.value().as_slice().expect("standard layout");
    let mut norms = vec![0.0f64; n];
    let mut out = vec![0.0f64; xs.len()];
    for r in 0..n {
        let row = &xs[r * d..(r + 1) * d];
        let nrm = (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
        norms[r] = nrm;
        for j in 0..d {
            out[r * d + j] = row[j] / nrm;
        }
    }
    let out = Arr::from_shape_vec(IxDyn(&[n, d]), out).unwrap();
    let xi = x.idx();
    let xv = x.value_rc();
    emit(&[x], out, move |g, sink| {
        sink.add_to(xi, || {
            // dx = g/n − x·(x·g)/n³  (n includes the eps pad)
            let gs = g.as_slice().unwrap();
            let xs = xv.as_slice().unwrap();
            let mut gx = vec![0.0f64; gs.len()];
            for r in 0..n {
                let nrm = norms[r];
                let mut dot = 0.0;
                for j in 0..d {
                    dot += xs[r * d + j] * gs[r * d + j];
                }
                let k = dot / (nrm * nrm * nrm);
                for j in 0..d {
                    gx[r * d + j] = gs[r * d + j] / nrm - xs[r * d + j] * k;
                }
            }
            Arr::from_shape_vec(IxDyn(&[n, d]), gx).unwrap()
        });
    })
}
