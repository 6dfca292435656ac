//! Fused loss kernels. Targets, teacher logits, and weights enter as plain
//! arrays — never tape nodes — so no gradient can reach them even in
//! principle. Each op reduces to a `[1]` scalar.

use crate::nn::ops::basic::{add, emit, scale, stable_sigmoid};
use crate::nn::tape::{Arr, Var};
use ndarray::IxDyn;

/// Σ w · BCE(σ(z), t), numerically stable in the logits.
pub fn bce_with_logits_sum(logits: &Var, targets: &Arr, weights: &Arr) -> Var {
    assert_eq!(logits.shape(), targets.shape(), "bce: target shape");
    assert_eq!(logits.shape(), weights.shape(), "bce: weight shape");
    let zs = logits.value().as_slice().expect("standard layout");
    let ts = targets.as_slice().unwrap();
    let ws = weights.as_slice().unwrap();
    let mut total = 0.0;
    for i in 0..zs.len() {
        let z = zs[i];
        // max(z,0) − z·t + ln(1 + e^(−|z|))
        total += ws[i] * (z.max(0.0) - z * ts[i] + (-z.abs()).exp().ln_1p());
    }
    let out = Arr::from_elem(IxDyn(&[1]), total);
    let li = logits.idx();
    let lv = logits.value_rc();
    let (t, w) = (targets.clone(), weights.clone());
    emit(&[logits], out, move |g, sink| {
        sink.add_to(li, || {
            let s = g[[0]];
            let mut gx = lv.as_ref().clone();
            let ts = t.as_slice().unwrap();
            let ws = w.as_slice().unwrap();
            for (i, v) in gx.as_slice_mut().unwrap().iter_mut().enumerate() {
                *v = s * ws[i] * (stable_sigmoid(*v) - ts[i]);
            }
            gx
        });
    })
}

/// Row-wise temperature-scaled KL from a frozen teacher distribution to the
/// student: Σ_rows w_r · T² · KL(softmax(t/T) ‖ softmax(s/T)).
///
/// The T² factor restores the gradient magnitude that the 1/T inside the
/// softmax would otherwise shrink, so the term stays comparable to the other
/// losses as the temperature changes.
pub fn kl_softmax_sum(student: &Var, teacher: &Arr, temp: f64, row_w: &[f64]) -> Var {
    let sh = student.shape().to_vec();
    assert_eq!(sh.len(), 2, "kl_softmax_sum: expected [N, K]");
    assert_eq!(teacher.shape(), &sh[..], "kl_softmax_sum: teacher shape");
    let (n, k) = (sh[0], sh[1]);
    assert_eq!(row_w.len(), n, "kl_softmax_sum: row weights");
    assert!(temp > 0.0, "kl_softmax_sum: temperature must be positive");

    let softmax_row = |row: &[f64], out: &mut [f64]| {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..row.len() {
            out[j] = ((row[j] - mx) / temp).exp();
            z += out[j];
        }
        for v in out.iter_mut() {
            *v /= z;
        }
    };

    let ss = student.value().as_slice().expect("standard layout");
    let ts = teacher.as_slice().unwrap();
    let mut p_s = vec![0.0f64; n * k];
    let mut p_t = vec![0.0f64; n * k];
    let mut total = 0.0;
    for r in 0..n {
        softmax_row(&ss[r * k..(r + 1) * k], &mut p_s[r * k..(r + 1) * k]);
        softmax_row(&ts[r * k..(r + 1) * k], &mut p_t[r * k..(r + 1) * k]);
        let mut kl = 0.0;
        for j in 0..k {
            let (pt, ps) = (p_t[r * k + j], p_s[r * k + j]);
            if pt > 0.0 {
                kl += pt * (pt.ln() - ps.ln());
            }
        }
        total += row_w[r] * temp * temp * kl;
    }
    let out = Arr::from_elem(IxDyn(&[1]), total);
    let si = student.idx();
    let row_w = row_w.to_vec();
    emit(&[student], out, move |g, sink| {
        sink.add_to(si, || {
            // d/ds = w · T · (p_s − p_t)
            let s = g[[0]];
            let mut gx = vec![0.0f64; n * k];
            for r in 0..n {
                let c = s * row_w[r] * temp;
                for j in 0..k {
                    gx[r * k + j] = c * (p_s[r * k + j] - p_t[r * k + j]);
                }
            }
            Arr::from_shape_vec(IxDyn(&[n, k]), gx).unwrap()
        });
    })
}

/// Distribution-over-bins regression: cross entropy of each row's softmax
/// against the two-hot target `(1−frac)·δ(left) + frac·δ(left+1)`, weighted
/// per row and summed.
pub fn dfl_ce_sum(logits: &Var, left: &[usize], frac: &[f64], row_w: &[f64]) -> Var {
    let sh = logits.shape().to_vec();
    assert_eq!(sh.len(), 2, "dfl_ce_sum: expected [N, bins]");
    let (n, bins) = (sh[0], sh[1]);
    assert!(left.len() == n && frac.len() == n && row_w.len() == n);
    for (i, &l) in left.iter().enumerate() {
        assert!(
            l + 1 < bins,
            "dfl_ce_sum: left bin {l} needs a right neighbour (bins = {bins})"
        );
        assert!(
            (0.0..=1.0).contains(&frac[i]),
            "dfl_ce_sum: frac out of [0,1]"
        );
    }

    let zs = logits.value().as_slice().expect("standard layout");
    let mut p = vec![0.0f64; n * bins];
    let mut total = 0.0;
    for r in 0..n {
        let row = &zs[r * bins..(r + 1) * bins];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..bins {
            p[r * bins + j] = (row[j] - mx).exp();
            z += p[r * bins + j];
        }
        for j in 0..bins {
            p[r * bins + j] /= z;
        }
        let (l, f) = (left[r], frac[r]);
        total -= row_w[r]
            * ((1.0 - f) * p[r * bins + l].ln() + f * p[r * bins + l + 1].ln());
    }
    let out = Arr::from_elem(IxDyn(&[1]), total);
    let li = logits.idx();
    let (left, frac, row_w) = (left.to_vec(), frac.to_vec(), row_w.to_vec());
    emit(&[logits], out, move |g, sink| {
        sink.add_to(li, || {
            let s = g[[0]];
            let mut gx = vec![0.0f64; n * bins];
            for r in 0..n {
                let c = s * row_w[r];
                for j in 0..bins {
                    gx[r * bins + j] = c * p[r * bins + j];
                }
                gx[r * bins + left[r]] -= c * (1.0 - frac[r]);
                gx[r * bins + left[r] + 1] -= c * frac[r];
            }
            Arr::from_shape_vec(IxDyn(&[n, bins]), gx).unwrap()
        });
    })
}

/// Σ w · |p − t|. The kink at p = t makes this non-differentiable there;
/// callers' targets are continuous values, so exact ties carry zero gradient
/// by convention.
pub fn l1_sum(pred: &Var, target: &Arr, weights: &Arr) -> Var {
    assert_eq!(pred.shape(), target.shape(), "l1: target shape");
    assert_eq!(pred.shape(), weights.shape(), "l1: weight shape");
    let ps = pred.value().as_slice().expect("standard layout");
    let ts = target.as_slice().unwrap();
    let ws = weights.as_slice().unwrap();
    let total: f64 = (0..ps.len()).map(|i| ws[i] * (ps[i] - ts[i]).abs()).sum();
    let out = Arr::from_elem(IxDyn(&[1]), total);
    let pi = pred.idx();
    let pv = pred.value_rc();
    let (t, w) = (target.clone(), weights.clone());
    emit(&[pred], out, move |g, sink| {
        sink.add_to(pi, || {
            let s = g[[0]];
            let mut gx = pv.as_ref().clone();
            let ts = t.as_slice().unwrap();
            let ws = w.as_slice().unwrap();
            for (i, v) in gx.as_slice_mut().unwrap().iter_mut().enumerate() {
                let d = *v - ts[i];
                *v = s * ws[i] * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            }
            gx
        });
    })
}

/// Σ cᵢ · xᵢ over scalar `[1]` terms.
pub fn weighted_sum(terms: &[(f64, &Var)]) -> Var {
    assert!(!terms.is_empty(), "weighted_sum: no terms");
    let mut acc = scale(terms[0].1, terms[0].0);
    for (c, v) in &terms[1..] {
        acc = add(&acc, &scale(v, *c));
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_scalar_fn, GRAD_REL_TOL};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
        Arr::from_shape_simple_fn(IxDyn(shape), || rng.random_range(lo..hi))
    }

    #[test]
    fn bce_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let z = rand_arr(&mut rng, &[4, 3], -3.0, 3.0);
        let t = rand_arr(&mut rng, &[4, 3], 0.0, 1.0);
        let w = rand_arr(&mut rng, &[4, 3], 0.1, 2.0);
        let err = check_scalar_fn(&[z], &|_t, vs| bce_with_logits_sum(&vs[0], &t, &w));
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn bce_matches_naive_formula() {
        let z = Arr::from_shape_vec(IxDyn(&[1, 2]), vec![0.7, -1.3]).unwrap();
        let t = Arr::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, 0.0]).unwrap();
        let w = Arr::ones(IxDyn(&[1, 2]));
        let got = bce_with_logits_sum(&Var::constant(z.clone()), &t, &w).item();
        let naive: f64 = (0..2)
            .map(|j| {
                let p = 1.0 / (1.0 + (-z[[0, j]]).exp());
                -(t[[0, j]] * p.ln() + (1.0 - t[[0, j]]) * (1.0 - p).ln())
            })
            .sum();
        assert!((got - naive).abs() < 1e-12, "{got} vs {naive}");
    }

    #[test]
    fn kl_grads_match_finite_differences_at_several_temperatures() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        for &temp in &[1.0, 2.0, 4.0] {
            let s = rand_arr(&mut rng, &[3, 5], -2.0, 2.0);
            let t = rand_arr(&mut rng, &[3, 5], -2.0, 2.0);
            let w = vec![1.0, 0.5, 2.0];
            let err =
                check_scalar_fn(&[s], &|_tape, vs| kl_softmax_sum(&vs[0], &t, temp, &w));
            assert!(err < GRAD_REL_TOL, "T = {temp}: rel err {err}");
        }
    }

    #[test]
    fn kl_is_zero_when_student_equals_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let s = rand_arr(&mut rng, &[2, 4], -2.0, 2.0);
        let v = kl_softmax_sum(&Var::constant(s.clone()), &s, 2.0, &[1.0, 1.0]).item();
        assert!(v.abs() < 1e-12, "KL(p‖p) = {v}");
        // And positive for a different distribution.
        let t = s.mapv(|x| x + 0.5) * 0.3;
        let v2 = kl_softmax_sum(&Var::constant(s), &t, 2.0, &[1.0, 1.0]).item();
        assert!(v2 > 0.0);
    }

    #[test]
    fn kl_value_matches_closed_form_two_logit_case() {
        // Two logits have a closed-form softmax: p(class 0) = σ((z0 − z1)/T).
        // Student (1, −1), teacher (−1, 1), T = 2 → verify T²·KL exactly.
        let s = Arr::from_shape_vec(IxDyn(&[1, 2]), vec![1.0, -1.0]).unwrap();
        let t = Arr::from_shape_vec(IxDyn(&[1, 2]), vec![-1.0, 1.0]).unwrap();
        let temp = 2.0;
        let ps0 = 1.0 / (1.0 + (-2.0f64 / temp).exp());
        let pt0 = 1.0 / (1.0 + (2.0f64 / temp).exp());
        let kl = pt0 * (pt0.ln() - ps0.ln())
            + (1.0 - pt0) * ((1.0 - pt0).ln() - (1.0 - ps0).ln());
        let want = temp * temp * kl;
        let got = kl_softmax_sum(&Var::constant(s), &t, temp, &[1.0]).item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dfl_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let z = rand_arr(&mut rng, &[5, 8], -2.0, 2.0);
        let left = vec![0usize, 3, 6, 2, 4];
        let frac = vec![0.25, 0.9, 0.0, 0.5, 1.0];
        let w = vec![1.0, 0.3, 2.0, 1.5, 0.7];
        let err = check_scalar_fn(&[z], &|_t, vs| dfl_ce_sum(&vs[0], &left, &frac, &w));
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn dfl_is_minimized_by_the_two_hot_target() {
        // Logits matching ln(two-hot + tiny) give (near-)minimal CE; pushing
        // mass elsewhere must increase the loss.
        let mut best = Arr::from_elem(IxDyn(&[1, 4]), -30.0);
        best[[0, 1]] = (0.75f64).ln();
        best[[0, 2]] = (0.25f64).ln();
        let at_best = dfl_ce_sum(&Var::constant(best), &[1], &[0.25], &[1.0]).item();
        let worse = Arr::zeros(IxDyn(&[1, 4]));
        let at_uniform = dfl_ce_sum(&Var::constant(worse), &[1], &[0.25], &[1.0]).item();
        assert!(at_best < at_uniform);
        // Entropy floor: CE ≥ H(target).
        let h = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!(at_best >= h - 1e-9 && at_best < h + 1e-6);
    }

    #[test]
    fn l1_grads_match_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let p = rand_arr(&mut rng, &[4, 4], -1.0, 1.0);
        // Keep |p − t| ≥ 0.3 so FD probes never cross the kink.
        let t = p.mapv(|v| v + if v > 0.0 { 0.4 } else { -0.4 });
        let w = rand_arr(&mut rng, &[4, 4], 0.5, 1.5);
        let err = check_scalar_fn(&[p], &|_tape, vs| l1_sum(&vs[0], &t, &w));
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let a = Var::scalar(2.0);
        let b = Var::scalar(3.0);
        let s = weighted_sum(&[(0.5, &a), (2.0, &b)]);
        assert!((s.item() - 7.0).abs() < 1e-12);
    }
}
