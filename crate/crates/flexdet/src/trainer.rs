//! Two-pass self-distilling training: optimizer, step logic, checkpoints,
//! and the outer loop.
//!
//! Each iteration runs the network twice on the same batch. The first pass
//! executes the deepest configuration (every stage full, latest exit),
//! applies the plain detection loss, and steps the optimizer immediately;
//! its outputs and boundary features are then frozen into plain arrays. The
//! second pass executes the shallowest distillation target (every adaptable
//! stage essential) and minimizes a blend of its own detection loss and
//! distillation terms against the frozen first pass, followed by a second
//! optimizer step. With `alpha = 1` the distillation terms vanish
//! structurally and the iteration degenerates to ordinary joint training of
//! both configurations.

use crate::config::{ArchSpec, DepthConfiguration, HeadKind};
use crate::data::{batch_images, evaluate_map, scene_targets, APReport, Scene};
use crate::losses::{
    base_total_loss, dense_gt_loss, flatten_dense, kd_dense_terms, kd_feat_loss, kd_set_terms,
    set_gt_loss, EdgeVariant, FeatPair, GtAssignments, GtLoss, KDHyper, KdTerms, Targets,
};
use crate::model::{build_detector, Detector, ForwardOutputs, HeadOutputs};
use crate::nn::tape::{GradMap, Param, Tape, Var};
use crate::nn::Arr;
use crate::stages::{BoundaryCapture, ExecutionMode};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay. Parameters without a gradient this
/// step (an untouched branch, a deeper decoder layer) are left alone
/// entirely — no moment decay, no weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
    t: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: BTreeMap::new(),
        }
    }

    /// Apply one update at the given learning rate.
    pub fn step(&mut self, params: &[Rc<Param>], grads: &GradMap, lr: f64) {
        for p in params {
            let Some(g) = grads.by_name(p.name()) else {
                continue;
            };
            let t = self.t.entry(p.name().to_string()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let m = self
                .m
                .entry(p.name().to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self
                .v
                .entry(p.name().to_string())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            // Decay only weight matrices/kernels, not biases or norm scales.
            let wd = if p.shape().len() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&self.m[p.name()], &self.v[p.name()]);
            p.update(|val| {
                ndarray::Zip::from(&mut *val)
                    .and(m)
                    .and(v)
                    .for_each(|w, &m, &v| {
                        let mh = m / bc1;
                        let vh = v / bc2;
                        *w -= lr * (mh / (vh.sqrt() + self.eps) + wd * *w);
                    });
            });
        }
    }
}

/// Cosine decay from `base` at step 0 towards zero at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    let total = total.max(1);
    let frac = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ---------------------------------------------------------------------------
// Train state and the two-pass step
// ---------------------------------------------------------------------------

pub struct TrainState {
    pub detector: Detector,
    pub opt: AdamW,
    pub hyper: KDHyper,
    pub base_lr: f64,
    pub step: u64,
    pub total_steps: u64,
}

/// Decoder exit the distillation target runs at: two thirds of the deepest
/// exit, rounded up.
pub fn distill_exit(arch: &ArchSpec) -> usize {
    (2 * arch.max_exit()).div_ceil(3).max(1)
}

impl TrainState {
    pub fn new(
        detector: Detector,
        hyper: KDHyper,
        base_lr: f64,
        weight_decay: f64,
        total_steps: u64,
    ) -> Result<TrainState> {
        hyper.validate()?;
        // The edge-distillation form must match what the head regresses:
        // plain coordinates for set prediction, bin distributions for dense.
        let ok = matches!(
            (&detector.arch.head_kind, &hyper.edge_variant),
            (HeadKind::SetPrediction, EdgeVariant::L1) | (HeadKind::Dense, EdgeVariant::Dfl)
        );
        if !ok {
            return Err(Error::Invalid(format!(
                "edge variant {:?} does not fit a {:?} head",
                hyper.edge_variant, detector.arch.head_kind
            )));
        }
        Ok(TrainState {
            detector,
            opt: AdamW::new(weight_decay),
            hyper,
            base_lr,
            step: 0,
            total_steps,
        })
    }

    pub fn lr_now(&self) -> f64 {
        cosine_lr(self.base_lr, self.step, self.total_steps)
    }
}

/// Scalars logged for one iteration.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    /// First-pass (deepest-configuration) detection loss.
    pub super_total: f64,
    /// Second-pass blended loss.
    pub base_total: f64,
    /// Second-pass component values, keyed like [`LossBreakdown`].
    pub components: BTreeMap<String, f64>,
}

/// Everything the second pass distills against, frozen to plain arrays.
struct FrozenTeacher {
    set: Option<(Arr, Arr, Vec<crate::assignment::MatchResult>)>,
    dense: Option<(Arr, Arr, Arr, Vec<crate::assignment::AnchorAssignment>)>,
    feats: BTreeMap<String, Arr>,
}

fn gt_loss_for(det: &Detector, out: &ForwardOutputs, targets: &[Targets]) -> Result<GtLoss> {
    match &out.head {
        HeadOutputs::Set(s) => set_gt_loss(s, targets),
        HeadOutputs::Dense(d) => {
            let flat = flatten_dense(d, det.arch.dfl_bins);
            dense_gt_loss(&flat, targets)
        }
    }
}

fn ensure_finite(label: &str, total: f64, components: &BTreeMap<String, f64>) -> Result<()> {
    if total.is_finite() && components.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::Numeric(format!(
        "{label} loss is not finite: total = {total}, components = {components:?}"
    )))
}

/// One two-pass iteration on a batch: deepest configuration with the plain
/// detection loss and an immediate optimizer step, then the essential
/// configuration against the frozen first pass.
pub fn train_step(state: &mut TrainState, images: &Arr, targets: &[Targets]) -> Result<StepStats> {
    let lr = state.lr_now();
    let params = state.detector.collect_params();
    let arch = state.detector.arch.clone();

    // Pass 1: the deepest configuration is its own teacher.
    let tape = Tape::new(true);
    let cfg_super = DepthConfiguration::super_net(&arch);
    let out = state.detector.forward(
        &tape,
        &Var::constant(images.clone()),
        &cfg_super,
        BoundaryCapture::Taken,
        true,
        true,
    )?;
    let (super_total, frozen) = {
        let (gt, frozen) = match &out.head {
            HeadOutputs::Set(s) => {
                let gt = set_gt_loss(s, targets)?;
                let exit = s.exit_layer();
                let matches = match &gt.assignments {
                    GtAssignments::Set(m) => m.clone(),
                    GtAssignments::Dense(_) => unreachable!(),
                };
                let frozen = FrozenTeacher {
                    set: Some((
                        exit.logits.value().clone(),
                        exit.boxes.value().clone(),
                        matches,
                    )),
                    dense: None,
                    feats: BTreeMap::new(),
                };
                (gt, frozen)
            }
            HeadOutputs::Dense(d) => {
                let flat = flatten_dense(d, arch.dfl_bins);
                let gt = dense_gt_loss(&flat, targets)?;
                let assigns = match &gt.assignments {
                    GtAssignments::Dense(a) => a.clone(),
                    GtAssignments::Set(_) => unreachable!(),
                };
                let frozen = FrozenTeacher {
                    set: None,
                    dense: Some((
                        flat.cls.value().clone(),
                        flat.boxes.value().clone(),
                        flat.reg.value().clone(),
                        assigns,
                    )),
                    feats: BTreeMap::new(),
                };
                (gt, frozen)
            }
        };
        let mut frozen = frozen;
        for id in &state.hyper.supervised_stages {
            let b = out
                .boundaries
                .get(id)
                .and_then(|b| b.full.as_ref())
                .ok_or_else(|| {
                    Error::Invalid(format!("stage {id} captured no full boundary"))
                })?;
            frozen.feats.insert(id.clone(), b.value().clone());
        }
        let total = gt.total.item();
        ensure_finite(
            "teacher",
            total,
            &BTreeMap::from([("gt_cls".into(), gt.cls), ("gt_reg".into(), gt.reg)]),
        )?;
        let grads = tape.backward(&gt.total);
        state.opt.step(&params, &grads, lr);
        (total, frozen)
    };

    // Pass 2: the essential configuration learns from ground truth and the
    // frozen teacher.
    let tape2 = Tape::new(true);
    let cfg_base = DepthConfiguration::uniform(&arch, ExecutionMode::Essential, distill_exit(&arch));
    let out2 = state.detector.forward(
        &tape2,
        &Var::constant(images.clone()),
        &cfg_base,
        BoundaryCapture::Taken,
        true,
        true,
    )?;
    let gt2 = gt_loss_for(&state.detector, &out2, targets)?;
    let kd = if state.hyper.alpha >= 1.0 {
        None
    } else {
        let (cls, reg_iou, reg_edge) = match &out2.head {
            HeadOutputs::Set(s) => {
                let (t_logits, t_boxes, t_matches) =
                    frozen.set.as_ref().expect("set teacher for a set head");
                kd_set_terms(
                    s,
                    match &gt2.assignments {
                        GtAssignments::Set(m) => m,
                        GtAssignments::Dense(_) => unreachable!(),
                    },
                    t_logits,
                    t_boxes,
                    t_matches,
                    state.hyper.t_cls,
                )?
            }
            HeadOutputs::Dense(d) => {
                let flat2 = flatten_dense(d, arch.dfl_bins);
                let (t_cls, t_boxes, t_reg, t_assigns) =
                    frozen.dense.as_ref().expect("dense teacher for a dense head");
                kd_dense_terms(
                    &flat2,
                    match &gt2.assignments {
                        GtAssignments::Dense(a) => a,
                        GtAssignments::Set(_) => unreachable!(),
                    },
                    t_cls,
                    t_boxes,
                    t_reg,
                    t_assigns,
                    state.hyper.t_cls,
                    state.hyper.t_dfl,
                )?
            }
        };
        let mut pairs = Vec::new();
        for id in &state.hyper.supervised_stages {
            let student = out2
                .boundaries
                .get(id)
                .and_then(|b| b.essential.clone())
                .ok_or_else(|| {
                    Error::Invalid(format!("stage {id} captured no essential boundary"))
                })?;
            pairs.push(FeatPair {
                stage_id: id.clone(),
                student,
                teacher: frozen.feats[id].clone(),
            });
        }
        let feat = kd_feat_loss(&pairs, &state.hyper, &arch)?;
        Some(KdTerms {
            cls,
            reg_iou,
            reg_edge,
            feat,
        })
    };
    let breakdown = base_total_loss(&gt2, kd.as_ref(), &state.hyper);
    let base_total = breakdown.value();
    ensure_finite("student", base_total, &breakdown.components)?;
    let grads2 = tape2.backward(&breakdown.total);
    state.opt.step(&params, &grads2, lr);

    let stats = StepStats {
        step: state.step,
        lr,
        super_total,
        base_total,
        components: breakdown.components,
    };
    state.step += 1;
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Run inference over scenes in batches and score it COCO-style.
pub fn evaluate(
    det: &Detector,
    scenes: &[Scene],
    config: &DepthConfiguration,
    batch_size: usize,
) -> Result<APReport> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to evaluate".into()));
    }
    let hw = scenes[0].hw();
    let mut preds = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(batch_size.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let images = batch_images(&refs);
        preds.extend(det.predict(&images, config)?);
        gts.extend(chunk.iter().map(scene_targets));
    }
    evaluate_map(&preds, &gts, hw, det.arch.num_classes)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FXDT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sidecar metadata written next to the tensor blob as `<path>.json`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub step: u64,
    pub arch_hash: String,
    pub switchable: bool,
    pub kd: KDHyper,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BlobHeader {
    params: Vec<TensorEntry>,
    /// Running normalization statistics; each entry holds mean then var.
    stats: Vec<TensorEntry>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::Io(format!("rename to {}: {e}", path.display())))
}

/// Serialize every parameter and running statistic of the detector, with a
/// trailing integrity digest, plus the JSON sidecar.
pub fn save_checkpoint(path: &Path, det: &Detector, meta: &CheckpointMeta) -> Result<()> {
    let params = det.collect_params();
    let stats = det.collect_stats();
    let header = BlobHeader {
        params: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name().to_string(),
                shape: p.shape(),
            })
            .collect(),
        stats: stats
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: vec![2, s.mean.borrow().len()],
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut blob = Vec::new();
    blob.extend_from_slice(CHECKPOINT_MAGIC);
    blob.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    blob.extend_from_slice(&header_json);
    for p in &params {
        for &x in p.value().iter() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    for s in &stats {
        for &x in s.mean.borrow().iter().chain(s.var.borrow().iter()) {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&blob);
    blob.extend_from_slice(&digest);
    write_atomic(path, &blob)?;
    let sidecar = serde_json::to_vec_pretty(meta)?;
    write_atomic(&sidecar_path(path), &sidecar)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Load a checkpoint into an already-built detector. The architecture (via
/// its hash in the sidecar) and the full tensor inventory must match.
pub fn load_checkpoint(path: &Path, det: &Detector) -> Result<CheckpointMeta> {
    let blob =
        std::fs::read(path).map_err(|e| Error::Io(format!("read {}: {e}", path.display())))?;
    if blob.len() < 4 + 4 + 8 + 32 || &blob[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Io("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(blob[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (body, digest) = blob.split_at(blob.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Io("checkpoint is corrupt: digest mismatch".into()));
    }
    let hlen = u64::from_le_bytes(blob[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > body.len() {
        return Err(Error::Io("checkpoint is corrupt: truncated header".into()));
    }
    let header: BlobHeader = serde_json::from_slice(&body[16..16 + hlen])?;

    let meta_json = std::fs::read_to_string(sidecar_path(path))
        .map_err(|e| Error::Io(format!("read sidecar: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_json)?;
    if meta.schema_version != CHECKPOINT_VERSION {
        return Err(Error::Invalid(format!(
            "sidecar schema version {}, expected {CHECKPOINT_VERSION}",
            meta.schema_version
        )));
    }
    if meta.arch_hash != det.arch.hash() {
        return Err(Error::Invalid(
            "checkpoint was written for a different architecture".into(),
        ));
    }

    let params = det.collect_params();
    let stats = det.collect_stats();
    if header.params.len() != params.len() || header.stats.len() != stats.len() {
        return Err(Error::Invalid(format!(
            "tensor inventory mismatch: {} + {} stored, {} + {} in the model",
            header.params.len(),
            header.stats.len(),
            params.len(),
            stats.len()
        )));
    }
    let mut off = 16 + hlen;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let need = n * 8;
        if off + need > body.len() {
            return Err(Error::Io("checkpoint is corrupt: truncated payload".into()));
        }
        let vals = body[off..off + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        off += need;
        Ok(vals)
    };
    for (entry, p) in header.params.iter().zip(&params) {
        if entry.name != p.name() || entry.shape != p.shape() {
            return Err(Error::Invalid(format!(
                "parameter mismatch: stored {} {:?}, model has {} {:?}",
                entry.name,
                entry.shape,
                p.name(),
                p.shape()
            )));
        }
        let vals = take(p.len())?;
        p.set(Arr::from_shape_vec(ndarray::IxDyn(&entry.shape), vals).unwrap());
    }
    for (entry, s) in header.stats.iter().zip(&stats) {
        let n = s.mean.borrow().len();
        if entry.name != s.name || entry.shape != vec![2, n] {
            return Err(Error::Invalid(format!(
                "statistics mismatch: stored {} {:?}",
                entry.name, entry.shape
            )));
        }
        *s.mean.borrow_mut() = take(n)?;
        *s.var.borrow_mut() = take(n)?;
    }
    if off != body.len() {
        return Err(Error::Io("checkpoint is corrupt: trailing payload".into()));
    }
    Ok(meta)
}

// ---------------------------------------------------------------------------
// Outer loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds both parameter init and batch order.
    pub seed: u64,
    /// Evaluate (and checkpoint the best model) every this many steps;
    /// 0 evaluates only at the end.
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Where to write `metrics.csv`, `last.ckpt`, `best.ckpt`. None skips
    /// all file output.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 200,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
            eval_every: 0,
            eval_batch: 8,
            out_dir: None,
        }
    }
}

pub struct TrainArtifacts {
    pub state: TrainState,
    pub history: Vec<StepStats>,
    /// Final validation reports for the essential and the deepest
    /// configuration.
    pub final_base: APReport,
    pub final_super: APReport,
    pub best_base_map: f64,
}

pub const METRICS_COLUMNS: &str =
    "step,lr,super_total,base_total,gt_cls,gt_reg,kd_cls,kd_reg_iou,kd_reg_edge,kd_feat,map_base,map_super";

fn metrics_row(s: &StepStats, eval: Option<(f64, f64)>) -> String {
    let c = |k: &str| s.components.get(k).copied().unwrap_or(0.0);
    let (mb, ms) = match eval {
        Some((b, su)) => (b.to_string(), su.to_string()),
        None => (String::new(), String::new()),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        s.step,
        s.lr,
        s.super_total,
        s.base_total,
        c("gt_cls"),
        c("gt_reg"),
        c("kd_cls"),
        c("kd_reg_iou"),
        c("kd_reg_edge"),
        c("kd_feat"),
        mb,
        ms
    )
}

/// Build a detector and train it on the scenes. Validation runs under both
/// the essential and the deepest configuration; the best essential-mode mAP
/// decides `best.ckpt`.
pub fn train(
    arch: &ArchSpec,
    hyper: KDHyper,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
    opts: &TrainOptions,
) -> Result<TrainArtifacts> {
    if train_scenes.is_empty() || val_scenes.is_empty() {
        return Err(Error::Invalid("need train and validation scenes".into()));
    }
    let detector = build_detector(arch, true, opts.seed)?;
    let mut state = TrainState::new(
        detector,
        hyper.clone(),
        opts.lr,
        opts.weight_decay,
        opts.steps as u64,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    let mut cursor = order.len(); // force a shuffle on the first step

    let cfg_base =
        DepthConfiguration::uniform(arch, ExecutionMode::Essential, distill_exit(arch));
    let cfg_super = DepthConfiguration::super_net(arch);

    let mut csv: Option<std::fs::File> = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Io(format!("create {}: {e}", dir.display())))?;
            let mut f = std::fs::File::create(dir.join("metrics.csv"))
                .map_err(|e| Error::Io(format!("create metrics.csv: {e}")))?;
            writeln!(f, "{METRICS_COLUMNS}").map_err(|e| Error::Io(e.to_string()))?;
            Some(f)
        }
        None => None,
    };
    let meta = |state: &TrainState| CheckpointMeta {
        schema_version: CHECKPOINT_VERSION,
        step: state.step,
        arch_hash: state.detector.arch.hash(),
        switchable: state.detector.switchable,
        kd: state.hyper.clone(),
    };

    let mut history = Vec::with_capacity(opts.steps);
    let mut best_base_map = f64::NEG_INFINITY;
    for it in 0..opts.steps {
        let mut batch: Vec<&Scene> = Vec::with_capacity(opts.batch_size);
        for _ in 0..opts.batch_size {
            if cursor >= order.len() {
                // Fisher–Yates reshuffle per epoch.
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                cursor = 0;
            }
            batch.push(&train_scenes[order[cursor]]);
            cursor += 1;
        }
        let images = batch_images(&batch);
        let targets: Vec<Targets> = batch.iter().map(|s| scene_targets(s)).collect();
        let stats = train_step(&mut state, &images, &targets)?;

        let due = opts.eval_every > 0 && (it + 1) % opts.eval_every == 0;
        let eval = if due {
            let base = evaluate(&state.detector, val_scenes, &cfg_base, opts.eval_batch)?;
            let sup = evaluate(&state.detector, val_scenes, &cfg_super, opts.eval_batch)?;
            if base.map > best_base_map {
                best_base_map = base.map;
                if let Some(dir) = &opts.out_dir {
                    save_checkpoint(&dir.join("best.ckpt"), &state.detector, &meta(&state))?;
                }
            }
            Some((base.map, sup.map))
        } else {
            None
        };
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{}", metrics_row(&stats, eval)).map_err(|e| Error::Io(e.to_string()))?;
        }
        history.push(stats);
    }

    let final_base = evaluate(&state.detector, val_scenes, &cfg_base, opts.eval_batch)?;
    let final_super = evaluate(&state.detector, val_scenes, &cfg_super, opts.eval_batch)?;
    if final_base.map > best_base_map {
        best_base_map = final_base.map;
        if let Some(dir) = &opts.out_dir {
            save_checkpoint(&dir.join("best.ckpt"), &state.detector, &meta(&state))?;
        }
    }
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&dir.join("last.ckpt"), &state.detector, &meta(&state))?;
    }
    Ok(TrainArtifacts {
        state,
        history,
        final_base,
        final_super,
        best_base_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig};

    fn small_batch(seed: u64, n: usize) -> (Arr, Vec<Targets>) {
        let cfg = GenConfig {
            clutter: 0,
            min_objects: 1,
            max_objects: 2,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(seed, n, &cfg).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let images = batch_images(&refs);
        let targets = scenes.iter().map(scene_targets).collect();
        (images, targets)
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let p = Param::new("w", ndarray::arr1(&[3.0, -2.0]).into_dyn());
        let params = vec![p.clone()];
        let mut opt = AdamW::new(0.0);
        for _ in 0..50 {
            let tape = Tape::new(true);
            let x = p.bind(&tape);
            let loss = crate::nn::ops::sum_all(&crate::nn::ops::mul(&x, &x));
            let grads = tape.backward(&loss);
            opt.step(&params, &grads, 0.1);
        }
        let v = p.value();
        assert!(v[0].abs() < 1.0 && v[1].abs() < 1.0, "{v:?}");
    }

    #[test]
    fn adamw_skips_params_without_gradients() {
        let used = Param::new("used", ndarray::arr1(&[1.0]).into_dyn());
        let unused = Param::new("unused", ndarray::arr1(&[1.0]).into_dyn());
        let params = vec![used.clone(), unused.clone()];
        let mut opt = AdamW::new(0.1);
        let tape = Tape::new(true);
        let x = used.bind(&tape);
        let loss = crate::nn::ops::sum_all(&crate::nn::ops::mul(&x, &x));
        let grads = tape.backward(&loss);
        opt.step(&params, &grads, 0.1);
        assert_eq!(unused.value()[0], 1.0, "untouched param must not move");
        assert_ne!(used.value()[0], 1.0);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let base = 1e-3;
        assert_eq!(cosine_lr(base, 0, 100), base);
        assert!((cosine_lr(base, 50, 100) - base * 0.5).abs() < 1e-15);
        assert!(cosine_lr(base, 100, 100) < 1e-18);
        let mut prev = f64::INFINITY;
        for t in 0..=100 {
            let lr = cosine_lr(base, t, 100);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn finite_guard_reports_components() {
        let comps = BTreeMap::from([("gt_cls".to_string(), f64::NAN)]);
        let err = ensure_finite("student", f64::NAN, &comps).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gt_cls"), "{msg}");
        ensure_finite("student", 1.0, &BTreeMap::new()).unwrap();
    }

    #[test]
    fn checkpoint_roundtrips_losslessly() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 5).unwrap();
        // Perturb running stats so they are not all default.
        for s in det.collect_stats() {
            s.mean.borrow_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            schema_version: CHECKPOINT_VERSION,
            step: 42,
            arch_hash: arch.hash(),
            switchable: true,
            kd: KDHyper::set_prediction_defaults(&arch),
        };
        save_checkpoint(&path, &det, &meta).unwrap();

        let fresh = build_detector(&arch, true, 99).unwrap();
        let loaded = load_checkpoint(&path, &fresh).unwrap();
        assert_eq!(loaded, meta);
        for (a, b) in det.collect_params().iter().zip(&fresh.collect_params()) {
            assert_eq!(a.name(), b.name());
            assert!(a
                .value()
                .iter()
                .zip(b.value().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in det.collect_stats().iter().zip(&fresh.collect_stats()) {
            assert_eq!(*a.mean.borrow(), *b.mean.borrow());
            assert_eq!(*a.var.borrow(), *b.var.borrow());
        }
    }

    #[test]
    fn checkpoint_rejects_corruption_version_and_arch_mismatch() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta {
            schema_version: CHECKPOINT_VERSION,
            step: 0,
            arch_hash: arch.hash(),
            switchable: true,
            kd: KDHyper::set_prediction_defaults(&arch),
        };
        save_checkpoint(&path, &det, &meta).unwrap();

        // Flip one payload byte: the digest no longer matches.
        let mut blob = std::fs::read(&path).unwrap();
        let mid = blob.len() / 2;
        blob[mid] ^= 0xff;
        std::fs::write(&path, &blob).unwrap();
        match load_checkpoint(&path, &det) {
            Err(Error::Io(m)) => assert!(m.contains("corrupt"), "{m}"),
            other => panic!("expected corruption error, got {other:?}"),
        }

        // Bump the version field (and nothing else): rejected before digest
        // checking can complain.
        let mut blob = std::fs::read(&path).unwrap();
        blob[mid] ^= 0xff; // restore payload
        blob[4] = 0xee;
        std::fs::write(&path, &blob).unwrap();
        match load_checkpoint(&path, &det) {
            Err(Error::Invalid(m)) => assert!(m.contains("version"), "{m}"),
            other => panic!("expected version error, got {other:?}"),
        }

        // Valid blob, wrong architecture.
        save_checkpoint(&path, &det, &meta).unwrap();
        let dense = build_detector(&ArchSpec::toy_dense(), true, 5).unwrap();
        match load_checkpoint(&path, &dense) {
            Err(Error::Invalid(m)) => assert!(m.contains("architecture"), "{m}"),
            other => panic!("expected architecture error, got {other:?}"),
        }
    }

    #[test]
    fn edge_variant_must_fit_the_head() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 1).unwrap();
        let wrong = KDHyper::dense_defaults(&ArchSpec::toy_dense());
        assert!(TrainState::new(det, wrong, 1e-3, 0.0, 10).is_err());
    }

    #[test]
    fn two_pass_steps_shrink_the_loss_on_one_batch() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 7).unwrap();
        let hyper = KDHyper::set_prediction_defaults(&arch);
        let mut state = TrainState::new(det, hyper, 1e-3, 0.0, 1_000).unwrap();
        let (images, targets) = small_batch(50, 2);
        let first = train_step(&mut state, &images, &targets).unwrap();
        let mut last = first.clone();
        for _ in 0..14 {
            last = train_step(&mut state, &images, &targets).unwrap();
        }
        assert!(
            last.super_total < 0.75 * first.super_total,
            "teacher loss {} -> {}",
            first.super_total,
            last.super_total
        );
        assert!(
            last.base_total < first.base_total,
            "student loss {} -> {}",
            first.base_total,
            last.base_total
        );
    }

    #[test]
    fn dense_two_pass_step_runs_and_improves() {
        let arch = ArchSpec::toy_dense();
        let det = build_detector(&arch, true, 7).unwrap();
        let hyper = KDHyper::dense_defaults(&arch);
        let mut state = TrainState::new(det, hyper, 1e-3, 0.0, 1_000).unwrap();
        let (images, targets) = small_batch(51, 2);
        let first = train_step(&mut state, &images, &targets).unwrap();
        let mut last = first.clone();
        for _ in 0..9 {
            last = train_step(&mut state, &images, &targets).unwrap();
        }
        assert!(last.super_total < first.super_total);
        assert!(last.components.contains_key("kd_reg_edge"));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let arch = ArchSpec::toy_detr();
        let run = || {
            let det = build_detector(&arch, true, 3).unwrap();
            let hyper = KDHyper::set_prediction_defaults(&arch);
            let mut state = TrainState::new(det, hyper, 1e-3, 1e-4, 100).unwrap();
            let (images, targets) = small_batch(60, 2);
            for _ in 0..3 {
                train_step(&mut state, &images, &targets).unwrap();
            }
            state
                .detector
                .collect_params()
                .iter()
                .flat_map(|p| p.value().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect::<Vec<u64>>()
        };
        assert_eq!(run(), run());
    }

    /// With `alpha = 1` the two-pass step is bit-identical to a plain joint
    /// loop that never builds any distillation machinery.
    #[test]
    fn alpha_one_equals_naive_joint_training() {
        let arch = ArchSpec::toy_detr();
        let (images, targets) = small_batch(70, 2);
        let steps = 3u64;
        let total = 100u64;
        let lr0 = 1e-3;
        let wd = 1e-4;

        let det_a = build_detector(&arch, true, 11).unwrap();
        let hyper = KDHyper {
            alpha: 1.0,
            ..KDHyper::set_prediction_defaults(&arch)
        };
        let mut state = TrainState::new(det_a, hyper, lr0, wd, total).unwrap();
        for _ in 0..steps {
            train_step(&mut state, &images, &targets).unwrap();
        }

        let det_b = build_detector(&arch, true, 11).unwrap();
        let params = det_b.collect_params();
        let mut opt = AdamW::new(wd);
        let cfg_super = DepthConfiguration::super_net(&arch);
        let cfg_base =
            DepthConfiguration::uniform(&arch, ExecutionMode::Essential, distill_exit(&arch));
        for t in 0..steps {
            let lr = cosine_lr(lr0, t, total);
            for cfg in [&cfg_super, &cfg_base] {
                let tape = Tape::new(true);
                let out = det_b
                    .forward(
                        &tape,
                        &Var::constant(images.clone()),
                        cfg,
                        BoundaryCapture::None,
                        true,
                        true,
                    )
                    .unwrap();
                let gt = set_gt_loss(out.head.as_set(), &targets).unwrap();
                let grads = tape.backward(&gt.total);
                opt.step(&params, &grads, lr);
            }
        }

        for (a, b) in state.detector.collect_params().iter().zip(&params) {
            assert_eq!(a.name(), b.name());
            let same = a
                .value()
                .iter()
                .zip(b.value().iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "parameter {} diverged", a.name());
        }
        for (a, b) in state
            .detector
            .collect_stats()
            .iter()
            .zip(&det_b.collect_stats())
        {
            assert_eq!(*a.mean.borrow(), *b.mean.borrow(), "{}", a.name);
        }
    }

    #[test]
    fn outer_loop_writes_metrics_and_checkpoints() {
        let cfg = GenConfig {
            clutter: 0,
            min_objects: 1,
            max_objects: 2,
            ..GenConfig::default()
        };
        let train_scenes = generate_dataset(80, 6, &cfg).unwrap();
        let val_scenes = generate_dataset(81, 4, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let arch = ArchSpec::toy_detr();
        let opts = TrainOptions {
            steps: 4,
            batch_size: 2,
            eval_every: 2,
            eval_batch: 4,
            seed: 9,
            out_dir: Some(dir.path().to_path_buf()),
            ..TrainOptions::default()
        };
        let arts = train(
            &arch,
            KDHyper::set_prediction_defaults(&arch),
            &train_scenes,
            &val_scenes,
            &opts,
        )
        .unwrap();
        assert_eq!(arts.history.len(), 4);
        assert!(arts.best_base_map >= arts.final_base.map - 1e-12);

        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(METRICS_COLUMNS));
        assert_eq!(lines.count(), 4);

        let det = build_detector(&arch, true, 0).unwrap();
        let meta = load_checkpoint(&dir.path().join("last.ckpt"), &det).unwrap();
        assert_eq!(meta.step, 4);
        assert!(load_checkpoint(&dir.path().join("best.ckpt"), &det).is_ok());
    }
}
