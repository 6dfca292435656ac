//! Central finite-difference verification for backward passes.
//!
//! Every operator's analytic gradient is compared against
//! `(f(x+h) - f(x-h)) / 2h` elementwise. With f64 arithmetic the truncation
//! plus round-off error of the probe sits around 1e-9 for O(1) values, so the
//! tolerance below has three orders of margin while still catching any real
//! backward-pass mistake.

use crate::nn::tape::{Arr, Tape, Var};

/// Accepted relative error between analytic and finite-difference gradients.
pub const GRAD_REL_TOL: f64 = 1e-3;

/// Relative step used for probes, scaled by each element's magnitude.
pub const FD_STEP: f64 = 1e-5;

/// Floor for the relative-error denominator: gradients smaller than this are
/// compared absolutely, which keeps FD round-off noise from dominating.
pub const REL_DENOM_FLOOR: f64 = 1e-4;

/// Maximum relative error between the analytic gradient and a central
/// finite-difference probe, over every element of every input. `f` builds a
/// scalar loss from leaf `Var`s and must be a pure function of them: the
/// check re-evaluates it many times.
pub fn check_scalar_fn<F: Fn(&Tape, &[Var]) -> Var>(inputs: &[Arr], f: &F) -> f64 {
    // Analytic pass.
    let tape = Tape::new(true);
    let leaves: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = f(&tape, &leaves);
    assert_eq!(loss.value().len(), 1, "gradcheck needs a scalar loss");
    let grads = tape.backward(&loss);
    let analytic: Vec<Option<Arr>> = leaves.iter().map(|l| grads.of(l).cloned()).collect();

    let eval = |arrs: &[Arr]| -> f64 {
        let t = Tape::new(false);
        let vars: Vec<Var> = arrs.iter().map(|a| Var::constant(a.clone())).collect();
        f(&t, &vars).item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Arr> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let ga = analytic[i].clone().unwrap_or_else(|| Arr::zeros(input.raw_dim()));
        for j in 0..input.len() {
            let flat_idx = j;
            let base = input.as_slice().expect("standard layout")[flat_idx];
            let h = FD_STEP * base.abs().max(1.0);

            probe[i].as_slice_mut().unwrap()[flat_idx] = base + h;
            let up = eval(&probe);
            probe[i].as_slice_mut().unwrap()[flat_idx] = base - h;
            let down = eval(&probe);
            probe[i].as_slice_mut().unwrap()[flat_idx] = base;

            let fd = (up - down) / (2.0 * h);
            let a = ga.as_slice().unwrap()[flat_idx];
            let denom = a.abs().max(fd.abs()).max(REL_DENOM_FLOOR);
            let rel = (a - fd).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops;
    use ndarray::IxDyn;

    #[test]
    fn detects_a_wrong_gradient() {
        // sum(2x) claims gradient 2; a deliberately broken "loss" whose value
        // is sum(3x) must blow past the tolerance.
        let x = Arr::from_elem(IxDyn(&[3]), 1.5);
        let err = check_scalar_fn(&[x], &|t, vs| {
            if t.is_recording() {
                ops::sum_all(&ops::scale(&vs[0], 2.0))
            } else {
                ops::sum_all(&ops::scale(&vs[0], 3.0))
            }
        });
        assert!(err > 0.3, "broken gradient should be caught, err = {err}");
    }

    #[test]
    fn passes_a_correct_gradient() {
        let x = Arr::from_elem(IxDyn(&[3]), 1.5);
        let err = check_scalar_fn(&[x], &|_t, vs| ops::sum_all(&ops::mul(&vs[0], &vs[0])));
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }
}
