//! Architecture and depth-configuration descriptors.
//!
//! An [`ArchSpec`] says how a detector is built: the ladder of backbone
//! stages, the neck stages stitched over them, and which head sits on top. A
//! [`DepthConfiguration`] says how much of that detector to run: one
//! essential/full mode bit per adaptable stage plus the decoder exit depth.
//! This module also enumerates every valid configuration in a canonical order
//! and prices each one with an analytic multiply-accumulate count, which is
//! the cost axis of every sweep.

use crate::stages::ExecutionMode;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// A chain of residual blocks; the stage output is the last block's.
    Residual,
    /// Split–transform–aggregate: all block outputs are concatenated and
    /// fused by a 1×1 aggregation layer.
    Csp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Query decoder with per-layer auxiliary predictions (any layer is a
    /// valid exit).
    SetPrediction,
    /// Dense per-anchor towers over three scales, distance-to-edge boxes as
    /// distributions over bins.
    Dense,
}

/// One feature stage: `blocks` (S) residual units of which the first
/// `split_point` (m) form the always-run essential path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub stage_id: String,
    pub kind: StageKind,
    /// Total block count S.
    pub blocks: usize,
    /// Essential-path length m; ignored (fixed full) when the stage is
    /// non-adaptable (S = 1).
    pub split_point: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Per-block hidden width c′: bottleneck width for residual stages,
    /// branch width for csp stages.
    pub hidden_per_block: usize,
    /// Whether the essential path owns a dedicated aggregation layer
    /// (csp stages with S ≥ 4); smaller csp stages reuse a column slice of
    /// the full aggregator.
    pub has_switchable_aggregator: bool,
    /// Stride relative to the input image (power of two).
    pub spatial_scale: usize,
}

impl StageSpec {
    /// A stage can drop its refinement path only if it has one.
    pub fn adaptable(&self) -> bool {
        self.blocks >= 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Invalid(format!("{}: zero blocks", self.stage_id)));
        }
        if self.adaptable() && !(1..self.blocks).contains(&self.split_point) {
            return Err(Error::Invalid(format!(
                "{}: split point {} outside [1, {})",
                self.stage_id, self.split_point, self.blocks
            )));
        }
        let wants_dedicated = self.kind == StageKind::Csp && self.blocks >= 4;
        if self.has_switchable_aggregator != wants_dedicated {
            return Err(Error::Invalid(format!(
                "{}: dedicated essential aggregator must be present exactly for csp stages \
                 with S ≥ 4 (S = {}, kind = {:?})",
                self.stage_id, self.blocks, self.kind
            )));
        }
        if !self.spatial_scale.is_power_of_two() {
            return Err(Error::Invalid(format!(
                "{}: spatial scale {} is not a power of two",
                self.stage_id, self.spatial_scale
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden_per_block == 0 {
            return Err(Error::Invalid(format!(
                "{}: zero channel width",
                self.stage_id
            )));
        }
        Ok(())
    }
}

/// Essential-path length for a stage of `s` blocks: the override if one is
/// given, otherwise ⌈S/2⌉. `None` result means the stage is non-adaptable
/// (S = 1 has no refinement path to drop).
pub fn split_point(s: usize, override_m: Option<usize>) -> Result<Option<usize>> {
    if s == 0 {
        return Err(Error::Invalid("stage needs at least one block".into()));
    }
    if s == 1 {
        return match override_m {
            None => Ok(None),
            Some(m) => Err(Error::Invalid(format!(
                "split point {m} given for a single-block (non-adaptable) stage"
            ))),
        };
    }
    match override_m {
        Some(m) if (1..s).contains(&m) => Ok(Some(m)),
        Some(m) => Err(Error::Invalid(format!(
            "split point {m} outside [1, {})",
            s
        ))),
        None => Ok(Some(s.div_ceil(2))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// P2..P5 in order of strictly increasing stride.
    pub backbone_stages: Vec<StageSpec>,
    /// Top-down then bottom-up stages, in execution order:
    /// FPN@P4, FPN@P3, PAN@P4, PAN@P5. All share one unified width.
    pub neck_stages: Vec<StageSpec>,
    pub head_kind: HeadKind,
    /// Decoder depth D (set-prediction head; ignored by the dense head).
    pub decoder_layers: usize,
    pub num_classes: usize,
    /// Learned object queries (set-prediction head).
    pub num_queries: usize,
    /// Bins per box edge distribution (dense head).
    pub dfl_bins: usize,
}

impl ArchSpec {
    /// Unified neck/head channel width.
    pub fn neck_channels(&self) -> usize {
        self.neck_stages[0].out_channels
    }

    /// Backbone stage whose stride is `scale`.
    pub fn backbone_at_scale(&self, scale: usize) -> Option<&StageSpec> {
        self.backbone_stages.iter().find(|s| s.spatial_scale == scale)
    }

    /// All stages in canonical order (backbone, then neck).
    pub fn all_stages(&self) -> impl Iterator<Item = &StageSpec> {
        self.backbone_stages.iter().chain(self.neck_stages.iter())
    }

    pub fn adaptable_stage_ids(&self) -> Vec<String> {
        self.all_stages()
            .filter(|s| s.adaptable())
            .map(|s| s.stage_id.clone())
            .collect()
    }

    /// Head scales, smallest stride first (P3, P4, P5).
    pub fn head_strides(&self) -> [usize; 3] {
        [8, 16, 32]
    }

    /// Feature-group of a stage ("backbone" or "neck"), used to pick
    /// distillation weights.
    pub fn stage_group(&self, stage_id: &str) -> Option<&'static str> {
        if self.backbone_stages.iter().any(|s| s.stage_id == stage_id) {
            Some("backbone")
        } else if self.neck_stages.iter().any(|s| s.stage_id == stage_id) {
            Some("neck")
        } else {
            None
        }
    }

    /// Effective decoder depth: the dense head has a single "exit".
    pub fn max_exit(&self) -> usize {
        match self.head_kind {
            HeadKind::SetPrediction => self.decoder_layers,
            HeadKind::Dense => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_stages.is_empty() {
            return Err(Error::Invalid("no backbone stages".into()));
        }
        for s in self.all_stages() {
            s.validate()?;
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in self.all_stages() {
            if !ids.insert(s.stage_id.clone()) {
                return Err(Error::Invalid(format!(
                    "duplicate stage id {}",
                    s.stage_id
                )));
            }
        }
        let scales: Vec<usize> = self.backbone_stages.iter().map(|s| s.spatial_scale).collect();
        if !scales.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invalid(format!(
                "backbone scales must strictly increase, got {scales:?}"
            )));
        }
        if self.neck_stages.len() != 4 {
            return Err(Error::Invalid(
                "neck must have four stages (FPN@P4, FPN@P3, PAN@P4, PAN@P5)".into(),
            ));
        }
        let u = self.neck_channels();
        for (s, want_scale) in self.neck_stages.iter().zip([16usize, 8, 16, 32]) {
            if s.in_channels != u || s.out_channels != u {
                return Err(Error::Invalid(format!(
                    "neck stage {} must use the unified width {u}",
                    s.stage_id
                )));
            }
            if s.spatial_scale != want_scale {
                return Err(Error::Invalid(format!(
                    "neck stage {} expected at stride {want_scale}, got {}",
                    s.stage_id, s.spatial_scale
                )));
            }
        }
        for scale in self.head_strides() {
            if self.backbone_at_scale(scale).is_none() {
                return Err(Error::Invalid(format!(
                    "neck references backbone stride {scale} which no stage produces"
                )));
            }
        }
        if self.num_classes == 0 {
            return Err(Error::Invalid("num_classes must be ≥ 1".into()));
        }
        match self.head_kind {
            HeadKind::SetPrediction => {
                if self.decoder_layers == 0 || self.num_queries == 0 {
                    return Err(Error::Invalid(
                        "set-prediction head needs decoder_layers ≥ 1 and num_queries ≥ 1".into(),
                    ));
                }
            }
            HeadKind::Dense => {
                if self.dfl_bins < 2 {
                    return Err(Error::Invalid("dense head needs dfl_bins ≥ 2".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ArchSpec> {
        let arch: ArchSpec = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }

    /// Stable content hash of the serialized spec (checkpoint compatibility).
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("ArchSpec serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The query-decoder toy model: residual stages throughout, decoder with
    /// three layers. Small enough to train on a single CPU core, big enough
    /// to keep multi-scale structure and matching nontrivial.
    pub fn toy_detr() -> ArchSpec {
        let res = |id: &str, s: usize, m: usize, ch: usize, scale: usize| StageSpec {
            stage_id: id.into(),
            kind: StageKind::Residual,
            blocks: s,
            split_point: m,
            in_channels: ch,
            out_channels: ch,
            hidden_per_block: ch / 2,
            has_switchable_aggregator: false,
            spatial_scale: scale,
        };
        let arch = ArchSpec {
            backbone_stages: vec![
                res("P2", 3, split_point(3, None).unwrap().unwrap(), 32, 4),
                res("P3", 4, split_point(4, None).unwrap().unwrap(), 64, 8),
                res("P4", 6, split_point(6, None).unwrap().unwrap(), 96, 16),
                res("P5", 3, split_point(3, None).unwrap().unwrap(), 128, 32),
            ],
            neck_stages: vec![
                res("FPN_P4", 3, 1, 64, 16),
                res("FPN_P3", 3, 1, 64, 8),
                res("PAN_P4", 3, 1, 64, 16),
                res("PAN_P5", 3, 1, 64, 32),
            ],
            head_kind: HeadKind::SetPrediction,
            decoder_layers: 3,
            num_classes: 3,
            num_queries: 20,
            dfl_bins: 0,
        };
        debug_assert!(arch.validate().is_ok());
        arch
    }

    /// The dense-head toy model: csp stages, deeper ones carrying dedicated
    /// essential aggregators, distance-distribution box regression.
    pub fn toy_dense() -> ArchSpec {
        let csp = |id: &str, s: usize, ch: usize, scale: usize| StageSpec {
            stage_id: id.into(),
            kind: StageKind::Csp,
            blocks: s,
            split_point: split_point(s, None).unwrap().unwrap(),
            in_channels: ch,
            out_channels: ch,
            hidden_per_block: ch / 2,
            has_switchable_aggregator: s >= 4,
            spatial_scale: scale,
        };
        let neck = |id: &str, scale: usize| StageSpec {
            stage_id: id.into(),
            kind: StageKind::Csp,
            blocks: 2,
            split_point: 1,
            in_channels: 64,
            out_channels: 64,
            hidden_per_block: 32,
            has_switchable_aggregator: false,
            spatial_scale: scale,
        };
        let arch = ArchSpec {
            backbone_stages: vec![
                csp("P2", 2, 32, 4),
                csp("P3", 2, 64, 8),
                csp("P4", 4, 96, 16),
                csp("P5", 4, 128, 32),
            ],
            neck_stages: vec![
                neck("FPN_P4", 16),
                neck("FPN_P3", 8),
                neck("PAN_P4", 16),
                neck("PAN_P5", 32),
            ],
            head_kind: HeadKind::Dense,
            decoder_layers: 1,
            num_classes: 3,
            num_queries: 0,
            dfl_bins: 8,
        };
        debug_assert!(arch.validate().is_ok());
        arch
    }
}

/// One runnable sub-network: a mode per adaptable stage plus the decoder
/// exit depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthConfiguration {
    pub stage_modes: BTreeMap<String, ExecutionMode>,
    pub decoder_exit: usize,
}

impl DepthConfiguration {
    pub fn mode_of(&self, stage_id: &str) -> ExecutionMode {
        // Non-adaptable stages are always full; adaptable ones must be listed.
        self.stage_modes
            .get(stage_id)
            .copied()
            .unwrap_or(ExecutionMode::Full)
    }

    /// All-full modes at the deepest exit.
    pub fn super_net(arch: &ArchSpec) -> DepthConfiguration {
        Self::uniform(arch, ExecutionMode::Full, arch.max_exit())
    }

    /// All-essential modes at the shallowest exit.
    pub fn base_net(arch: &ArchSpec) -> DepthConfiguration {
        Self::uniform(arch, ExecutionMode::Essential, 1)
    }

    pub fn uniform(arch: &ArchSpec, mode: ExecutionMode, exit: usize) -> DepthConfiguration {
        DepthConfiguration {
            stage_modes: arch
                .adaptable_stage_ids()
                .into_iter()
                .map(|id| (id, mode))
                .collect(),
            decoder_exit: exit,
        }
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        for s in arch.all_stages() {
            match (s.adaptable(), self.stage_modes.get(&s.stage_id)) {
                (true, Some(_)) => {}
                (true, None) => {
                    return Err(Error::Invalid(format!(
                        "adaptable stage {} has no mode",
                        s.stage_id
                    )))
                }
                (false, None) | (false, Some(ExecutionMode::Full)) => {}
                (false, Some(ExecutionMode::Essential)) => {
                    return Err(Error::Invalid(format!(
                        "stage {} is non-adaptable and cannot run essential",
                        s.stage_id
                    )))
                }
            }
        }
        for id in self.stage_modes.keys() {
            if !arch.all_stages().any(|s| &s.stage_id == id) {
                return Err(Error::Invalid(format!("unknown stage id {id}")));
            }
        }
        if !(1..=arch.max_exit()).contains(&self.decoder_exit) {
            return Err(Error::Invalid(format!(
                "decoder exit {} outside [1, {}]",
                self.decoder_exit,
                arch.max_exit()
            )));
        }
        Ok(())
    }

    /// Compact mode string in canonical stage order: `e`/`f` per adaptable
    /// stage. Used in CSV outputs.
    pub fn bitstring(&self, arch: &ArchSpec) -> String {
        arch.all_stages()
            .filter(|s| s.adaptable())
            .map(|s| match self.mode_of(&s.stage_id) {
                ExecutionMode::Essential => 'e',
                ExecutionMode::Full => 'f',
            })
            .collect()
    }
}

/// Every configuration over the arch's adaptable stages × the requested
/// exits, in canonical order: stage modes count up binary with the first
/// stage as the most significant digit and essential < full; exits ascend
/// fastest. The first element is therefore the base-net (at the smallest
/// requested exit) and the last is the super-net (at the largest).
pub fn enumerate_configs(
    arch: &ArchSpec,
    decoder_exits: Option<&[usize]>,
) -> Result<Vec<DepthConfiguration>> {
    arch.validate()?;
    let default_exits: Vec<usize> = (1..=arch.max_exit()).collect();
    let exits: Vec<usize> = match decoder_exits {
        Some(e) => {
            let mut e = e.to_vec();
            e.sort_unstable();
            e.dedup();
            if e.is_empty() || e.iter().any(|&x| !(1..=arch.max_exit()).contains(&x)) {
                return Err(Error::Invalid(format!(
                    "decoder exits {e:?} outside [1, {}]",
                    arch.max_exit()
                )));
            }
            e
        }
        None => default_exits,
    };
    let ids = arch.adaptable_stage_ids();
    let k = ids.len();
    assert!(k <= 20, "enumeration over {k} stages would be enormous");
    let mut out = Vec::with_capacity((1usize << k) * exits.len());
    for combo in 0..(1usize << k) {
        let stage_modes: BTreeMap<String, ExecutionMode> = ids
            .iter()
            .enumerate()
            .map(|(j, id)| {
                // First stage = most significant bit; 0 = essential.
                let bit = (combo >> (k - 1 - j)) & 1;
                let mode = if bit == 0 {
                    ExecutionMode::Essential
                } else {
                    ExecutionMode::Full
                };
                (id.clone(), mode)
            })
            .collect();
        for &exit in &exits {
            out.push(DepthConfiguration {
                stage_modes: stage_modes.clone(),
                decoder_exit: exit,
            });
        }
    }
    Ok(out)
}

/// MACs of one convolution.
pub fn conv_macs(k: usize, cin: usize, cout: usize, ho: usize, wo: usize) -> f64 {
    (k * k * cin * cout * ho * wo) as f64
}

fn stage_macs(s: &StageSpec, mode: ExecutionMode, h: usize, w: usize) -> f64 {
    let n_blocks = match mode {
        ExecutionMode::Full => s.blocks,
        ExecutionMode::Essential => s.split_point,
    };
    let c = s.hidden_per_block;
    match s.kind {
        StageKind::Residual => {
            // Each block: 3×3 C→c′ then 3×3 c′→C.
            n_blocks as f64
                * (conv_macs(3, s.out_channels, c, h, w) + conv_macs(3, c, s.out_channels, h, w))
        }
        StageKind::Csp => {
            // cv1 1×1 in→c′, blocks at width c′, then the aggregator over the
            // (n+1)·c′ concat.
            conv_macs(1, s.in_channels, c, h, w)
                + n_blocks as f64 * 2.0 * conv_macs(3, c, c, h, w)
                + conv_macs(1, (n_blocks + 1) * c, s.out_channels, h, w)
        }
    }
}

/// Analytic cost of one forward pass, in multiply-accumulates. Counts convs,
/// linears, and attention products; normalization and activations are
/// ignored (negligible for conv-dominated nets). Mirrors the structure built
/// by the model module.
pub fn flops_estimate(
    arch: &ArchSpec,
    config: &DepthConfiguration,
    input_hw: (usize, usize),
) -> Result<f64> {
    config.validate(arch)?;
    let (h, w) = input_hw;
    let mut macs = 0.0;

    // Stem: two stride-2 3×3 convs, 3 → c0/2 → c0.
    let c0 = arch.backbone_stages[0].in_channels;
    macs += conv_macs(3, 3, c0 / 2, h / 2, w / 2);
    macs += conv_macs(3, c0 / 2, c0, h / 4, w / 4);

    // Backbone: transition convs between stages, then the stage blocks.
    let mut prev_out = c0;
    for s in &arch.backbone_stages {
        let (sh, sw) = (h / s.spatial_scale, w / s.spatial_scale);
        if s.spatial_scale > 4 {
            macs += conv_macs(3, prev_out, s.in_channels, sh, sw);
        }
        macs += stage_macs(s, config.mode_of(&s.stage_id), sh, sw);
        prev_out = s.out_channels;
    }

    // Laterals: 1×1 projections of P3/P4/P5 onto the unified width.
    let u = arch.neck_channels();
    for scale in arch.head_strides() {
        let b = arch.backbone_at_scale(scale).unwrap();
        macs += conv_macs(1, b.out_channels, u, h / scale, w / scale);
    }

    // Neck: each stage is preceded by a 1×1 merge of two U-wide inputs;
    // PAN stages also pay a stride-2 3×3 downsample.
    for (i, s) in arch.neck_stages.iter().enumerate() {
        let (sh, sw) = (h / s.spatial_scale, w / s.spatial_scale);
        if i >= 2 {
            macs += conv_macs(3, u, u, sh, sw);
        }
        macs += conv_macs(1, 2 * u, u, sh, sw);
        macs += stage_macs(s, config.mode_of(&s.stage_id), sh, sw);
    }

    match arch.head_kind {
        HeadKind::SetPrediction => {
            let d = u; // decoder model width = unified neck width
            let q = arch.num_queries;
            let t: usize = arch
                .head_strides()
                .iter()
                .map(|&sc| (h / sc) * (w / sc))
                .sum();
            let ffn = 2 * d;
            for _layer in 0..config.decoder_exit {
                // Self-attention: 4 projections + scores + weighted sum.
                macs += (4 * q * d * d + 2 * q * q * d) as f64;
                // Cross-attention: q/o projections on queries, k/v on memory.
                macs += (2 * q * d * d + 2 * t * d * d + 2 * q * t * d) as f64;
                // FFN.
                macs += (2 * q * d * ffn) as f64;
                // Auxiliary heads: class linear + two-layer box MLP.
                macs += (q * d * arch.num_classes + q * (d * d + d * 4)) as f64;
            }
        }
        HeadKind::Dense => {
            for &scale in &arch.head_strides() {
                let (sh, sw) = (h / scale, w / scale);
                macs += conv_macs(3, u, u, sh, sw)
                    + conv_macs(1, u, arch.num_classes, sh, sw)
                    + conv_macs(3, u, u, sh, sw)
                    + conv_macs(1, u, 4 * arch.dfl_bins, sh, sw);
            }
        }
    }
    Ok(macs)
}
