//! Parameterized building blocks: conv, batch norm (plain and two-branch),
//! linear, layer norm, multi-head attention.
//!
//! Layers own `Rc<Param>`s and bind them onto whatever tape a forward pass
//! supplies, so the same weights serve training tapes and non-recording
//! evaluation tapes alike.

use crate::nn::init;
use crate::nn::ops;
use crate::nn::tape::{Param, Tape, Var};
use std::cell::RefCell;
use std::rc::Rc;

/// Which of the two normalization branches an adaptable block runs with.
/// Blocks on the always-on path see both modes during training and keep
/// separate statistics (and affine parameters) for each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormBranch {
    Essential,
    Full,
}

pub struct Conv2d {
    pub w: Rc<Param>,
    pub b: Option<Rc<Param>>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Conv2d {
        let w = Param::new(format!("{name}.w"), init::kaiming_conv(rng, cout, cin, k, k));
        let b = bias.then(|| {
            Param::new(
                format!("{name}.b"),
                crate::nn::tape::Arr::zeros(ndarray::IxDyn(&[cout])),
            )
        });
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let w = self.w.bind(tape);
        let b = self.b.as_ref().map(|p| p.bind(tape));
        ops::conv2d(x, &w, b.as_ref(), self.stride, self.pad)
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(self.w.clone());
        if let Some(b) = &self.b {
            out.push(b.clone());
        }
    }
}

/// Running statistics buffer shared by checkpointing.
pub struct RunningStats {
    pub name: String,
    pub mean: RefCell<Vec<f64>>,
    pub var: RefCell<Vec<f64>>,
}

pub struct BatchNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub stats: Rc<RunningStats>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(name: &str, c: usize) -> BatchNorm {
        BatchNorm::with_gamma(name, c, 1.0)
    }

    /// `gamma_init = 0` makes the layer output zero at initialization, which
    /// is how refinement branches start as exact identities.
    pub fn with_gamma(name: &str, c: usize, gamma_init: f64) -> BatchNorm {
        use crate::nn::tape::Arr;
        use ndarray::IxDyn;
        BatchNorm {
            gamma: Param::new(
                format!("{name}.gamma"),
                Arr::from_elem(IxDyn(&[c]), gamma_init),
            ),
            beta: Param::new(format!("{name}.beta"), Arr::zeros(IxDyn(&[c]))),
            stats: Rc::new(RunningStats {
                name: name.to_string(),
                mean: RefCell::new(vec![0.0; c]),
                var: RefCell::new(vec![1.0; c]),
            }),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// `train = true` normalizes with batch statistics (and, when
    /// `update_stats`, folds them into the running estimates); `train = false`
    /// uses the running estimates.
    pub fn forward(&self, tape: &Tape, x: &Var, train: bool, update_stats: bool) -> Var {
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        if train {
            let (y, batch) = ops::bn_train(x, &gamma, &beta, self.eps);
            if update_stats {
                let mut rm = self.stats.mean.borrow_mut();
                let mut rv = self.stats.var.borrow_mut();
                for c in 0..rm.len() {
                    rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * batch.mean[c];
                    rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * batch.var[c];
                }
            }
            y
        } else {
            let rm = self.stats.mean.borrow();
            let rv = self.stats.var.borrow();
            ops::bn_eval(x, &gamma, &beta, &rm, &rv, self.eps)
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }

    pub fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        out.push(self.stats.clone());
    }
}

/// Batch norm with one branch per execution mode, or a single shared branch
/// when `switchable = false` (the ablation twin). Always-on blocks see inputs
/// from two different distributions — refined upstream features in full mode,
/// bare essential features in the other — and per-mode branches keep those
/// statistics from contaminating each other.
pub struct ModalNorm {
    branches: Vec<BatchNorm>,
    switchable: bool,
}

impl ModalNorm {
    pub fn new(name: &str, c: usize, switchable: bool) -> ModalNorm {
        let branches = if switchable {
            vec![
                BatchNorm::new(&format!("{name}.ess"), c),
                BatchNorm::new(&format!("{name}.full"), c),
            ]
        } else {
            vec![BatchNorm::new(name, c)]
        };
        ModalNorm {
            branches,
            switchable,
        }
    }

    /// Single-branch norm with a chosen initial scale; `gamma_init = 0` is
    /// the refinement-block identity trick.
    pub fn single(name: &str, c: usize, gamma_init: f64) -> ModalNorm {
        ModalNorm {
            branches: vec![BatchNorm::with_gamma(name, c, gamma_init)],
            switchable: false,
        }
    }

    pub fn branch(&self, mode: NormBranch) -> &BatchNorm {
        if !self.switchable {
            return &self.branches[0];
        }
        match mode {
            NormBranch::Essential => &self.branches[0],
            NormBranch::Full => &self.branches[1],
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Var,
        mode: NormBranch,
        train: bool,
        update_stats: bool,
    ) -> Var {
        self.branch(mode).forward(tape, x, train, update_stats)
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        for b in &self.branches {
            b.collect_params(out);
        }
    }

    pub fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        for b in &self.branches {
            b.collect_stats(out);
        }
    }
}

pub struct Linear {
    pub w: Rc<Param>,
    pub b: Option<Rc<Param>>,
}

impl Linear {
    pub fn new(
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Linear {
        let w = Param::new(format!("{name}.w"), init::xavier_linear(rng, din, dout));
        let b = bias.then(|| {
            Param::new(
                format!("{name}.b"),
                crate::nn::tape::Arr::zeros(ndarray::IxDyn(&[dout])),
            )
        });
        Linear { w, b }
    }

    /// `[N, Din] → [N, Dout]`.
    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        let w = self.w.bind(tape);
        let y = ops::matmul(x, &w);
        match &self.b {
            Some(b) => ops::add_rows(&y, &b.bind(tape)),
            None => y,
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(self.w.clone());
        if let Some(b) = &self.b {
            out.push(b.clone());
        }
    }
}

pub struct LayerNorm {
    pub gamma: Rc<Param>,
    pub beta: Rc<Param>,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> LayerNorm {
        use crate::nn::tape::Arr;
        use ndarray::IxDyn;
        LayerNorm {
            gamma: Param::new(format!("{name}.gamma"), Arr::ones(IxDyn(&[d]))),
            beta: Param::new(format!("{name}.beta"), Arr::zeros(IxDyn(&[d]))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Var) -> Var {
        ops::layer_norm(x, &self.gamma.bind(tape), &self.beta.bind(tape), self.eps)
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(self.gamma.clone());
        out.push(self.beta.clone());
    }
}

/// Multi-head attention over `[B, T, D]` tensors.
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(name: &str, d_model: usize, heads: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        assert_eq!(d_model % heads, 0, "d_model must divide into heads");
        MultiHeadAttention {
            wq: Linear::new(&format!("{name}.wq"), d_model, d_model, true, rng),
            wk: Linear::new(&format!("{name}.wk"), d_model, d_model, true, rng),
            wv: Linear::new(&format!("{name}.wv"), d_model, d_model, true, rng),
            wo: Linear::new(&format!("{name}.wo"), d_model, d_model, true, rng),
            heads,
            d_model,
        }
    }

    /// Split `[B, T, D]` into `[B·H, T, D/H]` head-major batches.
    fn split_heads(&self, x: &Var, b: usize, t: usize) -> Var {
        let dh = self.d_model / self.heads;
        let x4 = ops::reshape(x, &[b, t, self.heads, dh]);
        let x4 = ops::permute(&x4, &[0, 2, 1, 3]); // [B, H, T, Dh]
        ops::reshape(&x4, &[b * self.heads, t, dh])
    }

    fn merge_heads(&self, x: &Var, b: usize, t: usize) -> Var {
        let dh = self.d_model / self.heads;
        let x4 = ops::reshape(x, &[b, self.heads, t, dh]);
        let x4 = ops::permute(&x4, &[0, 2, 1, 3]); // [B, T, H, Dh]
        ops::reshape(&x4, &[b, t, self.d_model])
    }

    /// `query: [B, Tq, D]`, `key/value: [B, Tk, D]` → `[B, Tq, D]`.
    pub fn forward(&self, tape: &Tape, query: &Var, key: &Var, value: &Var) -> Var {
        let (b, tq, d) = (query.shape()[0], query.shape()[1], query.shape()[2]);
        let tk = key.shape()[1];
        assert_eq!(d, self.d_model);
        assert_eq!(value.shape()[1], tk, "key/value length mismatch");

        let q2 = self.wq.forward(tape, &ops::reshape(query, &[b * tq, d]));
        let k2 = self.wk.forward(tape, &ops::reshape(key, &[b * tk, d]));
        let v2 = self.wv.forward(tape, &ops::reshape(value, &[b * tk, d]));

        let qh = self.split_heads(&ops::reshape(&q2, &[b, tq, d]), b, tq);
        let kh = self.split_heads(&ops::reshape(&k2, &[b, tk, d]), b, tk);
        let vh = self.split_heads(&ops::reshape(&v2, &[b, tk, d]), b, tk);

        let dh = self.d_model / self.heads;
        let scores = ops::scale(&ops::bmm_nt(&qh, &kh), 1.0 / (dh as f64).sqrt());
        let attn = ops::softmax_lastdim(&scores);
        let ctx = ops::bmm(&attn, &vh); // [B·H, Tq, Dh]
        let merged = self.merge_heads(&ctx, b, tq);
        let out = self
            .wo
            .forward(tape, &ops::reshape(&merged, &[b * tq, d]));
        ops::reshape(&out, &[b, tq, d])
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.wq.collect_params(out);
        self.wk.collect_params(out);
        self.wv.collect_params(out);
        self.wo.collect_params(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_scalar_fn, GRAD_REL_TOL};
    use crate::nn::tape::Arr;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batchnorm_running_stats_move_toward_batch_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let bn = BatchNorm::new("t.bn", 2);
        let tape = Tape::new(false);
        let x = Var::constant(Arr::from_shape_simple_fn(IxDyn(&[4, 2, 3, 3]), || {
            rng.random_range(0.0..1.0) + 5.0
        }));
        for _ in 0..200 {
            let _ = bn.forward(&tape, &x, true, true);
        }
        let rm = bn.stats.mean.borrow();
        assert!((rm[0] - 5.5).abs() < 0.2, "running mean {}", rm[0]);
    }

    #[test]
    fn batchnorm_eval_does_not_touch_stats() {
        let bn = BatchNorm::new("t.bn", 2);
        let tape = Tape::new(false);
        let x = Var::constant(Arr::from_elem(IxDyn(&[2, 2, 2, 2]), 7.0));
        let before = bn.stats.mean.borrow().clone();
        let _ = bn.forward(&tape, &x, false, false);
        let _ = bn.forward(&tape, &x, true, false); // train math, frozen stats
        assert_eq!(*bn.stats.mean.borrow(), before);
    }

    #[test]
    fn modal_norm_keeps_branch_statistics_separate() {
        let mn = ModalNorm::new("t.mn", 1, true);
        let tape = Tape::new(false);
        let lo = Var::constant(Arr::from_elem(IxDyn(&[2, 1, 2, 2]), -3.0));
        let hi = Var::constant(Arr::from_elem(IxDyn(&[2, 1, 2, 2]), 3.0));
        for _ in 0..50 {
            let _ = mn.forward(&tape, &lo, NormBranch::Essential, true, true);
            let _ = mn.forward(&tape, &hi, NormBranch::Full, true, true);
        }
        let ess = mn.branch(NormBranch::Essential).stats.mean.borrow()[0];
        let full = mn.branch(NormBranch::Full).stats.mean.borrow()[0];
        assert!(ess < -2.5 && full > 2.5, "ess {ess} full {full}");
    }

    #[test]
    fn non_switchable_modal_norm_shares_one_branch() {
        let mn = ModalNorm::new("t.mn", 1, false);
        let mut params = Vec::new();
        mn.collect_params(&mut params);
        assert_eq!(params.len(), 2); // one gamma, one beta
        assert!(std::ptr::eq(
            mn.branch(NormBranch::Essential),
            mn.branch(NormBranch::Full)
        ));
    }

    #[test]
    fn attention_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let mha = MultiHeadAttention::new("t.mha", 8, 2, &mut rng);
        let q = Arr::from_shape_simple_fn(IxDyn(&[2, 3, 8]), || rng.random_range(-1.0..1.0));
        let kv = Arr::from_shape_simple_fn(IxDyn(&[2, 5, 8]), || rng.random_range(-1.0..1.0));
        let err = check_scalar_fn(&[q, kv], &|tape, vs| {
            let y = mha.forward(tape, &vs[0], &vs[1], &vs[1]);
            crate::nn::ops::sum_all(&crate::nn::ops::mul(&y, &y))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }

    #[test]
    fn linear_and_layernorm_grads_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let lin = Linear::new("t.lin", 6, 4, true, &mut rng);
        let ln = LayerNorm::new("t.ln", 4);
        let x = Arr::from_shape_simple_fn(IxDyn(&[3, 6]), || rng.random_range(-1.0..1.0));
        let err = check_scalar_fn(&[x], &|tape, vs| {
            let y = ln.forward(tape, &lin.forward(tape, &vs[0]));
            crate::nn::ops::sum_all(&crate::nn::ops::mul(&y, &y))
        });
        assert!(err < GRAD_REL_TOL, "rel err {err}");
    }
}
