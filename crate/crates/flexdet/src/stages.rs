//! Adaptable feature stages.
//!
//! Every stage is a chain of residual blocks split into an always-run
//! *essential* path (blocks 1..m) and a skippable *refinement* path
//! (blocks m+1..S). Residual stages expose the running feature directly, so
//! the full output is literally the essential output pushed through the
//! remaining blocks. Csp stages concatenate all block outputs and fuse them
//! with a 1×1 aggregation conv; the essential path fuses only its own prefix,
//! either through a column slice of the full aggregator (S < 4) or through a
//! dedicated one (S ≥ 4).
//!
//! Normalization on the essential path is two-branched: the same blocks see
//! statistically different inputs depending on the mode, and each mode keeps
//! its own batch-norm statistics and affine parameters. Refinement blocks run
//! in full mode only and need a single branch; their final norm scale starts
//! at zero so a freshly built stage is an exact identity between its
//! essential boundary and its full output.

use crate::config::{StageKind, StageSpec};
use crate::nn::layers::{Conv2d, ModalNorm, NormBranch, RunningStats};
use crate::nn::{ops, Param, Tape, Var};
use crate::{Error, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

/// How much of a stage (and of the whole network) to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    /// Blocks 1..m only.
    Essential,
    /// All S blocks.
    Full,
}

impl ExecutionMode {
    fn branch(self) -> NormBranch {
        match self {
            ExecutionMode::Essential => NormBranch::Essential,
            ExecutionMode::Full => NormBranch::Full,
        }
    }
}

/// Which intermediate feature maps a forward pass should keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryCapture {
    /// Keep nothing beyond the stage output.
    None,
    /// Keep the boundary of the path actually taken (essential mode keeps the
    /// essential boundary, full mode the full one).
    Taken,
    /// In full mode, additionally compute what the essential path would have
    /// produced from this pass's intermediates. In essential mode there is no
    /// full boundary to add, so this degenerates to `Taken`.
    Both,
}

pub struct StageOutput {
    pub out: Var,
    pub boundary_essential: Option<Var>,
    pub boundary_full: Option<Var>,
}

/// Two 3×3 convs with a residual skip: `x + bn2(conv2(silu(bn1(conv1 x))))`.
struct Block {
    conv1: Conv2d,
    bn1: ModalNorm,
    conv2: Conv2d,
    bn2: ModalNorm,
}

impl Block {
    /// Essential-path block: norms are two-branched when `switchable`.
    fn essential(
        prefix: &str,
        c_io: usize,
        c_hidden: usize,
        switchable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Block {
        Block {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), c_io, c_hidden, 3, 1, 1, false, rng),
            bn1: ModalNorm::new(&format!("{prefix}.bn1"), c_hidden, switchable),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), c_hidden, c_io, 3, 1, 1, false, rng),
            bn2: ModalNorm::new(&format!("{prefix}.bn2"), c_io, switchable),
        }
    }

    /// Refinement-path block: single-branch norms, final scale zero so the
    /// block starts as an identity.
    fn refinement(prefix: &str, c_io: usize, c_hidden: usize, rng: &mut ChaCha8Rng) -> Block {
        Block {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), c_io, c_hidden, 3, 1, 1, false, rng),
            bn1: ModalNorm::single(&format!("{prefix}.bn1"), c_hidden, 1.0),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), c_hidden, c_io, 3, 1, 1, false, rng),
            bn2: ModalNorm::single(&format!("{prefix}.bn2"), c_io, 0.0),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var, branch: NormBranch, train: bool, upd: bool) -> Var {
        let h = self.conv1.forward(tape, x);
        let h = ops::silu(&self.bn1.forward(tape, &h, branch, train, upd));
        let d = self.conv2.forward(tape, &h);
        let d = self.bn2.forward(tape, &d, branch, train, upd);
        ops::add(x, &d)
    }

    fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.conv1.collect_params(out);
        self.bn1.collect_params(out);
        self.conv2.collect_params(out);
        self.bn2.collect_params(out);
    }

    fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        self.bn1.collect_stats(out);
        self.bn2.collect_stats(out);
    }
}

pub struct ResidualStage {
    spec: StageSpec,
    blocks: Vec<Block>,
}

impl ResidualStage {
    fn new(spec: &StageSpec, switchable: bool, rng: &mut ChaCha8Rng) -> Result<ResidualStage> {
        if spec.in_channels != spec.out_channels {
            return Err(Error::Invalid(format!(
                "{}: residual stages need in_channels == out_channels",
                spec.stage_id
            )));
        }
        let m = effective_split(spec);
        let blocks = (1..=spec.blocks)
            .map(|i| {
                let prefix = format!("{}.block{}", spec.stage_id, i);
                if i <= m {
                    Block::essential(&prefix, spec.out_channels, spec.hidden_per_block, switchable, rng)
                } else {
                    Block::refinement(&prefix, spec.out_channels, spec.hidden_per_block, rng)
                }
            })
            .collect();
        Ok(ResidualStage {
            spec: spec.clone(),
            blocks,
        })
    }

    fn forward(
        &self,
        tape: &Tape,
        x: &Var,
        mode: ExecutionMode,
        capture: BoundaryCapture,
        train: bool,
        upd: bool,
    ) -> StageOutput {
        let m = effective_split(&self.spec);
        let run = match mode {
            ExecutionMode::Essential => m,
            ExecutionMode::Full => self.spec.blocks,
        };
        let mut h = x.clone();
        let mut boundary_essential = None;
        for (i, b) in self.blocks.iter().take(run).enumerate() {
            h = b.forward(tape, &h, mode.branch(), train, upd);
            if i + 1 == m && capture != BoundaryCapture::None {
                boundary_essential = Some(h.clone());
            }
        }
        let boundary_full = match (mode, capture) {
            (ExecutionMode::Full, BoundaryCapture::Taken | BoundaryCapture::Both) => {
                Some(h.clone())
            }
            _ => None,
        };
        if mode == ExecutionMode::Full && capture == BoundaryCapture::Taken {
            boundary_essential = None;
        }
        StageOutput {
            out: h,
            boundary_essential,
            boundary_full,
        }
    }

    /// Push an essential-boundary feature through the refinement blocks. The
    /// full-mode stage output is exactly this applied to the full-mode
    /// essential boundary.
    pub fn refinement_only(&self, tape: &Tape, x_mid: &Var, train: bool, upd: bool) -> Var {
        let m = effective_split(&self.spec);
        let mut h = x_mid.clone();
        for b in &self.blocks[m..] {
            h = b.forward(tape, &h, NormBranch::Full, train, upd);
        }
        h
    }
}

pub struct CspStage {
    spec: StageSpec,
    cv1: Conv2d,
    bn_cv1: ModalNorm,
    blocks: Vec<Block>,
    /// Full aggregator over the (S+1)·c′ concat.
    cv2: Conv2d,
    /// Dedicated essential aggregator over the (m+1)·c′ prefix, present for
    /// S ≥ 4 and initialized from the matching column slice of `cv2`.
    cv2_ess: Option<Conv2d>,
    bn_cv2: ModalNorm,
}

impl CspStage {
    fn new(spec: &StageSpec, switchable: bool, rng: &mut ChaCha8Rng) -> Result<CspStage> {
        let m = effective_split(spec);
        let cp = spec.hidden_per_block;
        let id = &spec.stage_id;
        let cv1 = Conv2d::new(&format!("{id}.cv1"), spec.in_channels, cp, 1, 1, 0, false, rng);
        let bn_cv1 = ModalNorm::new(&format!("{id}.cv1.bn"), cp, switchable);
        let blocks = (1..=spec.blocks)
            .map(|i| {
                let prefix = format!("{id}.block{i}");
                if i <= m {
                    Block::essential(&prefix, cp, cp, switchable, rng)
                } else {
                    Block::refinement(&prefix, cp, cp, rng)
                }
            })
            .collect();
        let cv2 = Conv2d::new(
            &format!("{id}.cv2"),
            (spec.blocks + 1) * cp,
            spec.out_channels,
            1,
            1,
            0,
            false,
            rng,
        );
        let cv2_ess = spec.has_switchable_aggregator.then(|| {
            let agg = Conv2d::new(
                &format!("{id}.cv2_ess"),
                (m + 1) * cp,
                spec.out_channels,
                1,
                1,
                0,
                false,
                rng,
            );
            // Start from the slice of the full aggregator that covers the
            // same inputs, so both paths agree on the prefix at build time.
            let full_w = cv2.w.value();
            let sliced = full_w
                .slice_axis(ndarray::Axis(1), ndarray::Slice::from(0..(m + 1) * cp))
                .to_owned();
            agg.w.set(sliced);
            agg
        });
        let bn_cv2 = ModalNorm::new(&format!("{id}.cv2.bn"), spec.out_channels, switchable);
        Ok(CspStage {
            spec: spec.clone(),
            cv1,
            bn_cv1,
            blocks,
            cv2,
            cv2_ess,
            bn_cv2,
        })
    }

    /// Aggregate a prefix concat through the essential path: the dedicated
    /// conv when present, otherwise the matching column slice of the full
    /// aggregator (gradients flow into those columns of the shared weight).
    fn aggregate_essential(&self, tape: &Tape, prefix_concat: &Var) -> Var {
        match &self.cv2_ess {
            Some(agg) => agg.forward(tape, prefix_concat),
            None => {
                let w = self.cv2.w.bind(tape);
                let k = prefix_concat.shape()[1];
                let w_slice = ops::slice_axis(&w, 1, 0, k);
                ops::conv2d(prefix_concat, &w_slice, None, 1, 0)
            }
        }
    }

    fn forward(
        &self,
        tape: &Tape,
        x: &Var,
        mode: ExecutionMode,
        capture: BoundaryCapture,
        train: bool,
        upd: bool,
    ) -> StageOutput {
        let m = effective_split(&self.spec);
        let run = match mode {
            ExecutionMode::Essential => m,
            ExecutionMode::Full => self.spec.blocks,
        };
        let branch = mode.branch();
        let h0 = self.cv1.forward(tape, x);
        let h0 = ops::silu(&self.bn_cv1.forward(tape, &h0, branch, train, upd));
        let mut taps = vec![h0];
        for b in self.blocks.iter().take(run) {
            let next = b.forward(tape, taps.last().unwrap(), branch, train, upd);
            taps.push(next);
        }
        let refs: Vec<&Var> = taps.iter().collect();
        match mode {
            ExecutionMode::Essential => {
                let cat = ops::concat(1, &refs);
                let y = self.aggregate_essential(tape, &cat);
                let y = ops::silu(&self.bn_cv2.forward(tape, &y, branch, train, upd));
                StageOutput {
                    boundary_essential: (capture != BoundaryCapture::None).then(|| y.clone()),
                    boundary_full: None,
                    out: y,
                }
            }
            ExecutionMode::Full => {
                let cat = ops::concat(1, &refs);
                let y = self.cv2.forward(tape, &cat);
                let y = ops::silu(&self.bn_cv2.forward(tape, &y, branch, train, upd));
                let boundary_essential = (capture == BoundaryCapture::Both).then(|| {
                    let prefix: Vec<&Var> = taps.iter().take(m + 1).collect();
                    let pcat = ops::concat(1, &prefix);
                    let e = self.aggregate_essential(tape, &pcat);
                    // The extra boundary never drives statistics updates.
                    ops::silu(&self.bn_cv2.forward(tape, &e, NormBranch::Essential, train, false))
                });
                StageOutput {
                    boundary_essential,
                    boundary_full: (capture != BoundaryCapture::None).then(|| y.clone()),
                    out: y,
                }
            }
        }
    }
}

/// A stage of either kind, behind one interface.
pub enum Stage {
    Residual(ResidualStage),
    Csp(CspStage),
}

impl Stage {
    pub fn new(spec: &StageSpec, switchable: bool, rng: &mut ChaCha8Rng) -> Result<Stage> {
        spec.validate()?;
        Ok(match spec.kind {
            StageKind::Residual => Stage::Residual(ResidualStage::new(spec, switchable, rng)?),
            StageKind::Csp => Stage::Csp(CspStage::new(spec, switchable, rng)?),
        })
    }

    pub fn spec(&self) -> &StageSpec {
        match self {
            Stage::Residual(s) => &s.spec,
            Stage::Csp(s) => &s.spec,
        }
    }

    /// Mode used by non-adaptable stages regardless of the requested one.
    fn effective_mode(&self, mode: ExecutionMode) -> ExecutionMode {
        if self.spec().adaptable() {
            mode
        } else {
            ExecutionMode::Full
        }
    }

    pub fn forward(
        &self,
        tape: &Tape,
        x: &Var,
        mode: ExecutionMode,
        capture: BoundaryCapture,
        train: bool,
        update_stats: bool,
    ) -> StageOutput {
        let mode = self.effective_mode(mode);
        match self {
            Stage::Residual(s) => s.forward(tape, x, mode, capture, train, update_stats),
            Stage::Csp(s) => s.forward(tape, x, mode, capture, train, update_stats),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        match self {
            Stage::Residual(s) => {
                for b in &s.blocks {
                    b.collect_params(out);
                }
            }
            Stage::Csp(s) => {
                s.cv1.collect_params(out);
                s.bn_cv1.collect_params(out);
                for b in &s.blocks {
                    b.collect_params(out);
                }
                s.cv2.collect_params(out);
                if let Some(agg) = &s.cv2_ess {
                    agg.collect_params(out);
                }
                s.bn_cv2.collect_params(out);
            }
        }
    }

    pub fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        match self {
            Stage::Residual(s) => {
                for b in &s.blocks {
                    b.collect_stats(out);
                }
            }
            Stage::Csp(s) => {
                s.bn_cv1.collect_stats(out);
                for b in &s.blocks {
                    b.collect_stats(out);
                }
                s.bn_cv2.collect_stats(out);
            }
        }
    }
}

fn effective_split(spec: &StageSpec) -> usize {
    if spec.adaptable() {
        spec.split_point
    } else {
        spec.blocks
    }
}
