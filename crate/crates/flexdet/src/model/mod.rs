//! Detector assembly: stem, adaptable backbone/neck stages, and a head.
//!
//! The same built network serves every depth configuration — a forward pass
//! takes the configuration as data, routes each adaptable stage through its
//! essential or full path, and runs the decoder to the requested exit. Output
//! shapes are identical across configurations, which is what makes the
//! configurations interchangeable at deployment time.

pub mod heads;
pub mod posenc;

pub use heads::{
    decode_ltrb, dfl_expectation, iou_xyxy, nms, DenseOutputs, DenseScale, Detection, LayerPreds,
    SetOutputs,
};

use crate::config::{ArchSpec, DepthConfiguration, HeadKind};
use crate::nn::layers::{BatchNorm, Conv2d, RunningStats};
use crate::nn::{ops, Arr, Param, Tape, Var};
use crate::stages::{BoundaryCapture, Stage};
use crate::{Error, Result};
use heads::{DenseHead, SetHead};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Score floor and suppression threshold for dense-head decoding; the
/// set-prediction head emits its fixed query budget directly.
pub const SCORE_THRESH: f64 = 0.05;
pub const NMS_IOU: f64 = 0.65;
pub const MAX_DETECTIONS: usize = 100;

struct ConvBnAct {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBnAct {
    fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvBnAct {
        ConvBnAct {
            conv: Conv2d::new(name, cin, cout, k, stride, pad, false, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), cout),
        }
    }

    fn forward(&self, tape: &Tape, x: &Var, train: bool, upd: bool) -> Var {
        ops::silu(&self.bn.forward(tape, &self.conv.forward(tape, x), train, upd))
    }

    fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.conv.collect_params(out);
        self.bn.collect_params(out);
    }

    fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        self.bn.collect_stats(out);
    }
}

/// Captured essential/full features at one stage boundary.
pub struct StageBoundary {
    pub essential: Option<Var>,
    pub full: Option<Var>,
}

pub enum HeadOutputs {
    Set(SetOutputs),
    Dense(DenseOutputs),
}

impl HeadOutputs {
    pub fn as_set(&self) -> &SetOutputs {
        match self {
            HeadOutputs::Set(s) => s,
            HeadOutputs::Dense(_) => panic!("dense head where set-prediction outputs expected"),
        }
    }

    pub fn as_dense(&self) -> &DenseOutputs {
        match self {
            HeadOutputs::Dense(d) => d,
            HeadOutputs::Set(_) => panic!("set-prediction head where dense outputs expected"),
        }
    }
}

pub struct ForwardOutputs {
    pub head: HeadOutputs,
    /// Keyed by stage id; present for stages that captured anything.
    pub boundaries: BTreeMap<String, StageBoundary>,
}

enum Head {
    Set(SetHead),
    Dense(DenseHead),
}

pub struct Detector {
    pub arch: ArchSpec,
    /// Whether essential-path norms carry one branch per execution mode.
    pub switchable: bool,
    stem1: ConvBnAct,
    stem2: ConvBnAct,
    transitions: Vec<Option<ConvBnAct>>,
    backbone: Vec<Stage>,
    laterals: Vec<ConvBnAct>,
    neck_downs: Vec<Option<ConvBnAct>>,
    neck_merges: Vec<ConvBnAct>,
    necks: Vec<Stage>,
    head: Head,
}

/// Deterministically build a detector: the same `(arch, switchable, seed)`
/// always yields bitwise-identical parameters.
pub fn build_detector(arch: &ArchSpec, switchable: bool, seed: u64) -> Result<Detector> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c0 = arch.backbone_stages[0].in_channels;
    let stem1 = ConvBnAct::new("stem1", 3, c0 / 2, 3, 2, 1, &mut rng);
    let stem2 = ConvBnAct::new("stem2", c0 / 2, c0, 3, 2, 1, &mut rng);

    let mut transitions = Vec::new();
    let mut backbone = Vec::new();
    let mut prev_out = c0;
    for spec in &arch.backbone_stages {
        let trans = (spec.spatial_scale > 4).then(|| {
            ConvBnAct::new(
                &format!("trans.{}", spec.stage_id),
                prev_out,
                spec.in_channels,
                3,
                2,
                1,
                &mut rng,
            )
        });
        transitions.push(trans);
        backbone.push(Stage::new(spec, switchable, &mut rng)?);
        prev_out = spec.out_channels;
    }

    let u = arch.neck_channels();
    let laterals = arch
        .head_strides()
        .iter()
        .map(|&s| {
            let b = arch.backbone_at_scale(s).unwrap();
            ConvBnAct::new(&format!("lat.s{s}"), b.out_channels, u, 1, 1, 0, &mut rng)
        })
        .collect();

    let mut neck_downs = Vec::new();
    let mut neck_merges = Vec::new();
    let mut necks = Vec::new();
    for (i, spec) in arch.neck_stages.iter().enumerate() {
        let down = (i >= 2).then(|| {
            ConvBnAct::new(
                &format!("neck.{}.down", spec.stage_id),
                u,
                u,
                3,
                2,
                1,
                &mut rng,
            )
        });
        neck_downs.push(down);
        neck_merges.push(ConvBnAct::new(
            &format!("neck.{}.merge", spec.stage_id),
            2 * u,
            u,
            1,
            1,
            0,
            &mut rng,
        ));
        necks.push(Stage::new(spec, switchable, &mut rng)?);
    }

    let head = match arch.head_kind {
        HeadKind::SetPrediction => Head::Set(SetHead::new(
            u,
            arch.decoder_layers,
            arch.num_queries,
            arch.num_classes,
            &mut rng,
        )),
        HeadKind::Dense => Head::Dense(DenseHead::new(
            u,
            &arch.head_strides(),
            arch.num_classes,
            arch.dfl_bins,
            &mut rng,
        )),
    };

    let det = Detector {
        arch: arch.clone(),
        switchable,
        stem1,
        stem2,
        transitions,
        backbone,
        laterals,
        neck_downs,
        neck_merges,
        necks,
        head,
    };
    debug_assert!({
        let params = det.collect_params();
        let names: std::collections::BTreeSet<&str> =
            params.iter().map(|p| p.name()).collect();
        names.len() == params.len()
    });
    Ok(det)
}

impl Detector {
    /// One forward pass under a depth configuration.
    ///
    /// `images`: `[B, 3, H, W]` with H, W divisible by 32. `capture` keeps
    /// stage-boundary features for distillation and representation analysis.
    pub fn forward(
        &self,
        tape: &Tape,
        images: &Var,
        config: &DepthConfiguration,
        capture: BoundaryCapture,
        train: bool,
        update_stats: bool,
    ) -> Result<ForwardOutputs> {
        config.validate(&self.arch)?;
        let shape = images.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 32 != 0 || shape[3] % 32 != 0 {
            return Err(Error::Invalid(format!(
                "images must be [B, 3, H, W] with H, W divisible by 32, got {shape:?}"
            )));
        }

        let mut boundaries = BTreeMap::new();
        let mut record = |id: &str, so: &crate::stages::StageOutput| {
            if so.boundary_essential.is_some() || so.boundary_full.is_some() {
                boundaries.insert(
                    id.to_string(),
                    StageBoundary {
                        essential: so.boundary_essential.clone(),
                        full: so.boundary_full.clone(),
                    },
                );
            }
        };

        let x = self.stem1.forward(tape, images, train, update_stats);
        let mut x = self.stem2.forward(tape, &x, train, update_stats);
        let mut by_scale: BTreeMap<usize, Var> = BTreeMap::new();
        for (stage, trans) in self.backbone.iter().zip(&self.transitions) {
            if let Some(t) = trans {
                x = t.forward(tape, &x, train, update_stats);
            }
            let mode = config.mode_of(&stage.spec().stage_id);
            let so = stage.forward(tape, &x, mode, capture, train, update_stats);
            record(&stage.spec().stage_id, &so);
            x = so.out;
            by_scale.insert(stage.spec().spatial_scale, x.clone());
        }

        let lats: Vec<Var> = self
            .arch
            .head_strides()
            .iter()
            .zip(&self.laterals)
            .map(|(&s, l)| l.forward(tape, &by_scale[&s], train, update_stats))
            .collect();
        let (p3, p4, p5) = (&lats[0], &lats[1], &lats[2]);

        let mut run_neck = |i: usize, a: &Var, b: &Var, tape: &Tape| -> Var {
            let a = match &self.neck_downs[i] {
                Some(d) => d.forward(tape, a, train, update_stats),
                None => ops::upsample_nearest_2x(a),
            };
            let cat = ops::concat(1, &[&a, b]);
            let merged = self.neck_merges[i].forward(tape, &cat, train, update_stats);
            let stage = &self.necks[i];
            let mode = config.mode_of(&stage.spec().stage_id);
            let so = stage.forward(tape, &merged, mode, capture, train, update_stats);
            record(&stage.spec().stage_id, &so);
            so.out
        };

        let f_fpn4 = run_neck(0, p5, p4, tape);
        let f_fpn3 = run_neck(1, &f_fpn4, p3, tape);
        let f_pan4 = run_neck(2, &f_fpn3, &f_fpn4, tape);
        let f_pan5 = run_neck(3, &f_pan4, p5, tape);
        let feats = vec![f_fpn3, f_pan4, f_pan5];

        let head = match &self.head {
            Head::Set(h) => HeadOutputs::Set(h.forward(tape, &feats, config.decoder_exit)),
            Head::Dense(h) => HeadOutputs::Dense(h.forward(tape, &feats, train, update_stats)),
        };
        Ok(ForwardOutputs { head, boundaries })
    }

    /// Inference: decode per-image detections in pixel coordinates.
    pub fn predict(&self, images: &Arr, config: &DepthConfiguration) -> Result<Vec<Vec<Detection>>> {
        let tape = Tape::new(false);
        let (bsz, img_h, img_w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
        let out = self.forward(
            &tape,
            &Var::constant(images.clone()),
            config,
            BoundaryCapture::None,
            false,
            false,
        )?;
        let mut per_image = Vec::with_capacity(bsz);
        match &out.head {
            HeadOutputs::Set(s) => {
                let preds = s.exit_layer();
                let logits = preds.logits.value();
                let boxes = preds.boxes.value();
                let (q, k) = (logits.shape()[1], logits.shape()[2]);
                for b in 0..bsz {
                    let mut dets = Vec::with_capacity(q);
                    for qi in 0..q {
                        let (mut best_c, mut best_s) = (0, f64::NEG_INFINITY);
                        for c in 0..k {
                            let p = 1.0 / (1.0 + (-logits[[b, qi, c]]).exp());
                            if p > best_s {
                                best_s = p;
                                best_c = c;
                            }
                        }
                        let (cx, cy, w, h) = (
                            boxes[[b, qi, 0]] * img_w as f64,
                            boxes[[b, qi, 1]] * img_h as f64,
                            boxes[[b, qi, 2]] * img_w as f64,
                            boxes[[b, qi, 3]] * img_h as f64,
                        );
                        dets.push(Detection {
                            class_id: best_c,
                            score: best_s,
                            bbox: [
                                (cx - w / 2.0).clamp(0.0, img_w as f64),
                                (cy - h / 2.0).clamp(0.0, img_h as f64),
                                (cx + w / 2.0).clamp(0.0, img_w as f64),
                                (cy + h / 2.0).clamp(0.0, img_h as f64),
                            ],
                        });
                    }
                    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
                    per_image.push(dets);
                }
            }
            HeadOutputs::Dense(d) => {
                let mut decoded = Vec::new();
                for scale in &d.scales {
                    let (h, w) = (scale.cls.shape()[2], scale.cls.shape()[3]);
                    let dist = dfl_expectation(&scale.reg, self.dense_bins());
                    let bx = decode_ltrb(&dist, h, w, scale.stride);
                    decoded.push((scale.cls.value_rc(), bx.value_rc(), h * w));
                }
                for b in 0..bsz {
                    let mut cands = Vec::new();
                    for (cls, bx, t) in &decoded {
                        let k = cls.shape()[1];
                        for ti in 0..*t {
                            for c in 0..k {
                                let (h_i, w_i) = (ti / cls.shape()[3], ti % cls.shape()[3]);
                                let p = 1.0 / (1.0 + (-cls[[b, c, h_i, w_i]]).exp());
                                if p >= SCORE_THRESH {
                                    cands.push(Detection {
                                        class_id: c,
                                        score: p,
                                        bbox: [
                                            bx[[b, ti, 0]].clamp(0.0, img_w as f64),
                                            bx[[b, ti, 1]].clamp(0.0, img_h as f64),
                                            bx[[b, ti, 2]].clamp(0.0, img_w as f64),
                                            bx[[b, ti, 3]].clamp(0.0, img_h as f64),
                                        ],
                                    });
                                }
                            }
                        }
                    }
                    let mut kept = nms(cands, NMS_IOU);
                    kept.truncate(MAX_DETECTIONS);
                    per_image.push(kept);
                }
            }
        }
        Ok(per_image)
    }

    fn dense_bins(&self) -> usize {
        match &self.head {
            Head::Dense(h) => h.bins,
            Head::Set(_) => panic!("set-prediction head has no bins"),
        }
    }

    pub fn collect_params(&self) -> Vec<Rc<Param>> {
        let mut out = Vec::new();
        self.stem1.collect_params(&mut out);
        self.stem2.collect_params(&mut out);
        for (s, t) in self.backbone.iter().zip(&self.transitions) {
            if let Some(t) = t {
                t.collect_params(&mut out);
            }
            s.collect_params(&mut out);
        }
        for l in &self.laterals {
            l.collect_params(&mut out);
        }
        for ((s, d), m) in self.necks.iter().zip(&self.neck_downs).zip(&self.neck_merges) {
            if let Some(d) = d {
                d.collect_params(&mut out);
            }
            m.collect_params(&mut out);
            s.collect_params(&mut out);
        }
        match &self.head {
            Head::Set(h) => h.collect_params(&mut out),
            Head::Dense(h) => h.collect_params(&mut out),
        }
        out
    }

    pub fn collect_stats(&self) -> Vec<Rc<RunningStats>> {
        let mut out = Vec::new();
        self.stem1.collect_stats(&mut out);
        self.stem2.collect_stats(&mut out);
        for (s, t) in self.backbone.iter().zip(&self.transitions) {
            if let Some(t) = t {
                t.collect_stats(&mut out);
            }
            s.collect_stats(&mut out);
        }
        for l in &self.laterals {
            l.collect_stats(&mut out);
        }
        for ((s, d), m) in self.necks.iter().zip(&self.neck_downs).zip(&self.neck_merges) {
            if let Some(d) = d {
                d.collect_stats(&mut out);
            }
            m.collect_stats(&mut out);
            s.collect_stats(&mut out);
        }
        if let Head::Dense(h) = &self.head {
            h.collect_stats(&mut out);
        }
        out
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.collect_params().iter().map(|p| p.len()).sum()
    }
}
