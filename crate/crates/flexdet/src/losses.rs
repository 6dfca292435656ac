//! Training objectives: ground-truth detection losses for both head styles,
//! and the distillation terms that pull the essential path toward the frozen
//! behaviour of the full-depth network.
//!
//! Teachers and targets enter every function as plain arrays (`Arr`), never
//! as tape nodes, so no gradient can reach them by construction. All losses
//! reduce to `[1]` scalars; component values are exported separately for
//! logging.

use crate::assignment::{
    align_teacher_queries, cxcywh_to_xyxy, detr_assign, kd_anchor_sets, tal_assign,
    AnchorAssignment, MatchResult, MatchWeights,
};
use crate::config::ArchSpec;
use crate::model::heads::{decode_ltrb, dfl_expectation, DenseOutputs, SetOutputs};
use crate::nn::{ops, Arr, Var};
use crate::{Error, Result};
use ndarray::{Axis, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Pads denominators in box-geometry ratios (IoU, enclosing areas, aspect
/// ratios) so degenerate boxes can't divide by zero.
const GEOM_EPS: f64 = 1e-9;

/// Variance pad used when ℓ2-normalizing pooled features.
pub const FEAT_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Distillation hyperparameters
// ---------------------------------------------------------------------------

/// Which regression-shape ("edge") distillation loss to use. Set-prediction
/// heads regress box coordinates directly, so their edge loss is an L1 on the
/// coordinates; dense heads regress a distribution over discrete edge
/// distances, so their edge loss is a temperature-scaled KL between the bin
/// distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeVariant {
    L1,
    Dfl,
}

/// Weights and temperatures of the second (distilled) training pass.
///
/// The base-network objective is
/// `α·L_gt + (1−α)·(w_cls_kd·L_cls_kd + w_iou_kd·L_iou + w_edge_kd·L_edge + L_feat)`,
/// where `L_feat` already contains its per-group weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KDHyper {
    /// Ground-truth share of the base-network objective; 1.0 disables
    /// distillation entirely.
    pub alpha: f64,
    pub w_cls_kd: f64,
    /// Softmax temperature of the classification KL.
    pub t_cls: f64,
    pub w_iou_kd: f64,
    pub w_edge_kd: f64,
    pub edge_variant: EdgeVariant,
    /// Softmax temperature of the bin-distribution KL (dfl edge variant).
    pub t_dfl: f64,
    /// Feature-loss weight per stage group ("backbone", "neck").
    pub feat_weights: BTreeMap<String, f64>,
    /// Stage ids whose boundary features are distilled (the set `I`).
    pub supervised_stages: Vec<String>,
}

impl KDHyper {
    /// Defaults tuned for the set-prediction (query decoder) head.
    pub fn set_prediction_defaults(arch: &ArchSpec) -> KDHyper {
        KDHyper {
            alpha: 0.0,
            w_cls_kd: 3.75,
            t_cls: 1.0,
            w_iou_kd: 2.0,
            w_edge_kd: 5.0,
            edge_variant: EdgeVariant::L1,
            t_dfl: 1.0,
            feat_weights: BTreeMap::from([
                ("backbone".to_string(), 0.5),
                ("neck".to_string(), 0.2),
            ]),
            supervised_stages: arch.adaptable_stage_ids(),
        }
    }

    /// Defaults tuned for the dense (grid) head.
    pub fn dense_defaults(arch: &ArchSpec) -> KDHyper {
        KDHyper {
            alpha: 0.2,
            w_cls_kd: 0.4,
            t_cls: 2.0,
            w_iou_kd: 1.2,
            w_edge_kd: 0.8,
            edge_variant: EdgeVariant::Dfl,
            t_dfl: 1.0,
            feat_weights: BTreeMap::from([
                ("backbone".to_string(), 0.4),
                ("neck".to_string(), 0.4),
            ]),
            supervised_stages: arch.adaptable_stage_ids(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.t_cls <= 0.0 || self.t_dfl <= 0.0 {
            return Err(Error::Invalid("temperatures must be positive".into()));
        }
        for (name, w) in [
            ("w_cls_kd", self.w_cls_kd),
            ("w_iou_kd", self.w_iou_kd),
            ("w_edge_kd", self.w_edge_kd),
        ] {
            if w < 0.0 {
                return Err(Error::Invalid(format!("{name} must be non-negative")));
            }
        }
        for (g, w) in &self.feat_weights {
            if *w < 0.0 {
                return Err(Error::Invalid(format!("feat weight for {g} is negative")));
            }
        }
        let uniq: BTreeSet<_> = self.supervised_stages.iter().collect();
        if uniq.len() != self.supervised_stages.len() {
            return Err(Error::Invalid("duplicate supervised stage id".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

/// Ground truth for one image. Boxes are `cxcywh` in [0, 1] image fractions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    pub boxes: Vec<[f64; 4]>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `[G, 4]` normalized `cxcywh`.
    pub fn boxes_arr(&self) -> Arr {
        let mut a = Arr::zeros(IxDyn(&[self.boxes.len(), 4]));
        for (i, b) in self.boxes.iter().enumerate() {
            for j in 0..4 {
                a[[i, j]] = b[j];
            }
        }
        a
    }

    /// `[G, 4]` pixel `xyxy` for an image of `img_hw = (height, width)`.
    pub fn boxes_xyxy_px(&self, img_hw: (usize, usize)) -> Arr {
        let (h, w) = (img_hw.0 as f64, img_hw.1 as f64);
        let mut a = Arr::zeros(IxDyn(&[self.boxes.len(), 4]));
        for (i, b) in self.boxes.iter().enumerate() {
            let xy = cxcywh_to_xyxy(b);
            a[[i, 0]] = xy[0] * w;
            a[[i, 1]] = xy[1] * h;
            a[[i, 2]] = xy[2] * w;
            a[[i, 3]] = xy[3] * h;
        }
        a
    }
}

// ---------------------------------------------------------------------------
// Differentiable box geometry
// ---------------------------------------------------------------------------

fn coords4(x: &Var) -> (Var, Var, Var, Var) {
    (
        ops::slice_axis(x, 1, 0, 1),
        ops::slice_axis(x, 1, 1, 2),
        ops::slice_axis(x, 1, 2, 3),
        ops::slice_axis(x, 1, 3, 4),
    )
}

fn one_minus(x: &Var) -> Var {
    ops::scale(&ops::add_scalar(x, -1.0), -1.0)
}

/// `[N, 4]` `cxcywh` → `[N, 4]` `xyxy` on the tape.
pub fn cxcywh_to_xyxy_var(b: &Var) -> Var {
    let (cx, cy, w, h) = coords4(b);
    let hw = ops::scale(&w, 0.5);
    let hh = ops::scale(&h, 0.5);
    let x1 = ops::sub(&cx, &hw);
    let y1 = ops::sub(&cy, &hh);
    let x2 = ops::add(&cx, &hw);
    let y2 = ops::add(&cy, &hh);
    ops::concat(1, &[&x1, &y1, &x2, &y2])
}

/// Pairwise generalized IoU of `[N, 4]` `xyxy` boxes, in [−1, 1], shape
/// `[N, 1]`. Both sides may carry gradients; pass a constant for the side
/// that shouldn't.
pub fn giou_pairs_xyxy(pred: &Var, gt: &Var) -> Var {
    let (px1, py1, px2, py2) = coords4(pred);
    let (gx1, gy1, gx2, gy2) = coords4(gt);
    let iw = ops::clamp_min(&ops::sub(&ops::min_elem(&px2, &gx2), &ops::max_elem(&px1, &gx1)), 0.0);
    let ih = ops::clamp_min(&ops::sub(&ops::min_elem(&py2, &gy2), &ops::max_elem(&py1, &gy1)), 0.0);
    let inter = ops::mul(&iw, &ih);
    let pa = ops::mul(
        &ops::clamp_min(&ops::sub(&px2, &px1), 0.0),
        &ops::clamp_min(&ops::sub(&py2, &py1), 0.0),
    );
    let ga = ops::mul(
        &ops::clamp_min(&ops::sub(&gx2, &gx1), 0.0),
        &ops::clamp_min(&ops::sub(&gy2, &gy1), 0.0),
    );
    let union = ops::clamp_min(&ops::sub(&ops::add(&pa, &ga), &inter), GEOM_EPS);
    let iou = ops::div(&inter, &union);
    let cw = ops::sub(&ops::max_elem(&px2, &gx2), &ops::min_elem(&px1, &gx1));
    let ch = ops::sub(&ops::max_elem(&py2, &gy2), &ops::min_elem(&py1, &gy1));
    let ca = ops::clamp_min(&ops::mul(&cw, &ch), GEOM_EPS);
    ops::sub(&iou, &ops::div(&ops::sub(&ca, &union), &ca))
}

/// CIoU aspect-term coefficients `α = v / (1 − IoU + v)` at the given `xyxy`
/// values, `[N, 1]`. Mirrors the clamping of the differentiable path exactly.
pub fn ciou_alpha_values(pred: &Arr, gt: &Arr) -> Arr {
    let n = pred.shape()[0];
    let mut out = Arr::zeros(IxDyn(&[n, 1]));
    for i in 0..n {
        let (px1, py1, px2, py2) = (pred[[i, 0]], pred[[i, 1]], pred[[i, 2]], pred[[i, 3]]);
        let (gx1, gy1, gx2, gy2) = (gt[[i, 0]], gt[[i, 1]], gt[[i, 2]], gt[[i, 3]]);
        let iw = (px2.min(gx2) - px1.max(gx1)).max(0.0);
        let ih = (py2.min(gy2) - py1.max(gy1)).max(0.0);
        let inter = iw * ih;
        let (pw, ph) = ((px2 - px1).max(GEOM_EPS), (py2 - py1).max(GEOM_EPS));
        let (gw, gh) = ((gx2 - gx1).max(GEOM_EPS), (gy2 - gy1).max(GEOM_EPS));
        let union = (pw * ph + gw * gh - inter).max(GEOM_EPS);
        let iou = inter / union;
        let da = (gw / gh).atan() - (pw / ph).atan();
        let v = 4.0 / (std::f64::consts::PI * std::f64::consts::PI) * da * da;
        out[[i, 0]] = v / (1.0 - iou + v).max(GEOM_EPS);
    }
    out
}

/// Complete-IoU loss `1 − CIoU` for `[N, 4]` `xyxy` pairs with the aspect
/// coefficients pinned to `alpha` (`[N, 1]`). This is the function the
/// backward pass actually differentiates — α is conventionally held constant
/// — so gradient checks should probe this form.
pub fn ciou_loss_pairs_given_alpha(pred: &Var, gt: &Var, alpha: &Arr) -> Var {
    let (px1, py1, px2, py2) = coords4(pred);
    let (gx1, gy1, gx2, gy2) = coords4(gt);
    let iw = ops::clamp_min(&ops::sub(&ops::min_elem(&px2, &gx2), &ops::max_elem(&px1, &gx1)), 0.0);
    let ih = ops::clamp_min(&ops::sub(&ops::min_elem(&py2, &gy2), &ops::max_elem(&py1, &gy1)), 0.0);
    let inter = ops::mul(&iw, &ih);
    let pw = ops::clamp_min(&ops::sub(&px2, &px1), GEOM_EPS);
    let ph = ops::clamp_min(&ops::sub(&py2, &py1), GEOM_EPS);
    let gw = ops::clamp_min(&ops::sub(&gx2, &gx1), GEOM_EPS);
    let gh = ops::clamp_min(&ops::sub(&gy2, &gy1), GEOM_EPS);
    let union = ops::clamp_min(
        &ops::sub(&ops::add(&ops::mul(&pw, &ph), &ops::mul(&gw, &gh)), &inter),
        GEOM_EPS,
    );
    let iou = ops::div(&inter, &union);

    // Center-distance penalty, normalized by the enclosing-box diagonal.
    let pcx = ops::scale(&ops::add(&px1, &px2), 0.5);
    let pcy = ops::scale(&ops::add(&py1, &py2), 0.5);
    let gcx = ops::scale(&ops::add(&gx1, &gx2), 0.5);
    let gcy = ops::scale(&ops::add(&gy1, &gy2), 0.5);
    let dx = ops::sub(&pcx, &gcx);
    let dy = ops::sub(&pcy, &gcy);
    let rho2 = ops::add(&ops::mul(&dx, &dx), &ops::mul(&dy, &dy));
    let cw = ops::sub(&ops::max_elem(&px2, &gx2), &ops::min_elem(&px1, &gx1));
    let ch = ops::sub(&ops::max_elem(&py2, &gy2), &ops::min_elem(&py1, &gy1));
    let c2 = ops::clamp_min(&ops::add(&ops::mul(&cw, &cw), &ops::mul(&ch, &ch)), GEOM_EPS);

    // Aspect-ratio penalty v, weighted by the pinned α.
    let da = ops::sub(&ops::atan(&ops::div(&gw, &gh)), &ops::atan(&ops::div(&pw, &ph)));
    let v = ops::scale(&ops::mul(&da, &da), 4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let penalty = ops::add(&ops::div(&rho2, &c2), &ops::mul(&Var::constant(alpha.clone()), &v));
    one_minus(&ops::sub(&iou, &penalty))
}

/// Complete-IoU loss `1 − CIoU` for `[N, 4]` `xyxy` pairs, shape `[N, 1]`,
/// with α recomputed from the current values and held constant.
pub fn ciou_loss_pairs_xyxy(pred: &Var, gt: &Var) -> Var {
    let alpha = ciou_alpha_values(pred.value(), gt.value());
    ciou_loss_pairs_given_alpha(pred, gt, &alpha)
}

// ---------------------------------------------------------------------------
// Ground-truth detection losses
// ---------------------------------------------------------------------------

/// Set-prediction loss coefficients (shared with the matching cost).
pub const SET_LOSS_CLS: f64 = 2.0;
pub const SET_LOSS_L1: f64 = 5.0;
pub const SET_LOSS_GIOU: f64 = 2.0;

/// Dense-head loss coefficients.
pub const DENSE_LOSS_BOX: f64 = 7.5;
pub const DENSE_LOSS_CLS: f64 = 0.5;
pub const DENSE_LOSS_DFL: f64 = 1.5;

/// What the ground-truth loss assigned to each image, kept so distillation
/// can align the student's and teacher's matched predictions.
#[derive(Clone, Debug)]
pub enum GtAssignments {
    /// Exit-layer query matches, one per image.
    Set(Vec<MatchResult>),
    /// Flattened-anchor assignments, one per image.
    Dense(Vec<AnchorAssignment>),
}

impl GtAssignments {
    pub fn as_set(&self) -> &[MatchResult] {
        match self {
            GtAssignments::Set(m) => m,
            GtAssignments::Dense(_) => panic!("dense assignments where query matches expected"),
        }
    }

    pub fn as_dense(&self) -> &[AnchorAssignment] {
        match self {
            GtAssignments::Dense(a) => a,
            GtAssignments::Set(_) => panic!("query matches where dense assignments expected"),
        }
    }
}

/// A ground-truth loss with its class/regression split and the assignments
/// it used.
#[derive(Clone)]
pub struct GtLoss {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
    pub assignments: GtAssignments,
}

/// Bipartite matches for every decoder layer: `matches[layer][image]`.
pub fn set_gt_matches(
    outputs: &SetOutputs,
    targets: &[Targets],
    weights: &MatchWeights,
) -> Result<Vec<Vec<MatchResult>>> {
    let mut all = Vec::with_capacity(outputs.layers.len());
    for layer in &outputs.layers {
        let lv = layer.logits.value();
        let bv = layer.boxes.value();
        let mut per_image = Vec::with_capacity(targets.len());
        for (b, t) in targets.iter().enumerate() {
            let logits = lv.index_axis(Axis(0), b).to_owned().into_dyn();
            let boxes = bv.index_axis(Axis(0), b).to_owned().into_dyn();
            per_image.push(detr_assign(&logits, &boxes, &t.classes, &t.boxes_arr(), weights)?);
        }
        all.push(per_image);
    }
    Ok(all)
}

/// Set-prediction ground-truth loss with every decoder layer supervised
/// through the given matches. Normalization follows the usual convention:
/// each term is divided by the total ground-truth count of the batch.
pub fn set_gt_loss_with_matches(
    outputs: &SetOutputs,
    targets: &[Targets],
    matches: &[Vec<MatchResult>],
) -> Result<GtLoss> {
    let sh = outputs.layers[0].logits.shape().to_vec();
    let (b_n, q_n, k_n) = (sh[0], sh[1], sh[2]);
    if targets.len() != b_n {
        return Err(Error::Invalid(format!(
            "{} target sets for batch of {b_n}",
            targets.len()
        )));
    }
    if matches.len() != outputs.layers.len() {
        return Err(Error::Invalid("one match set per decoder layer required".into()));
    }
    let num_boxes = targets.iter().map(|t| t.len()).sum::<usize>().max(1) as f64;

    let mut terms: Vec<Var> = Vec::new();
    let mut cls_value = 0.0;
    let mut reg_value = 0.0;
    for (layer, layer_matches) in outputs.layers.iter().zip(matches) {
        if layer_matches.len() != b_n {
            return Err(Error::Invalid("one match per image required".into()));
        }
        // Classification: every query is supervised; matched queries carry a
        // one-hot target for their object's class.
        let mut cls_t = Arr::zeros(IxDyn(&[b_n, q_n, k_n]));
        let mut rows: Vec<usize> = Vec::new();
        let mut gt_rows: Vec<[f64; 4]> = Vec::new();
        for (b, m) in layer_matches.iter().enumerate() {
            for (&q, &o) in &m.sigma {
                cls_t[[b, q, targets[b].classes[o]]] = 1.0;
                rows.push(b * q_n + q);
                gt_rows.push(targets[b].boxes[o]);
            }
        }
        let ones = Arr::ones(IxDyn(&[b_n, q_n, k_n]));
        let cls = ops::scale(
            &ops::bce_with_logits_sum(&layer.logits, &cls_t, &ones),
            SET_LOSS_CLS / num_boxes,
        );
        cls_value += cls.item();
        terms.push(cls);

        if rows.is_empty() {
            continue;
        }
        let mut gt = Arr::zeros(IxDyn(&[rows.len(), 4]));
        for (i, r) in gt_rows.iter().enumerate() {
            for j in 0..4 {
                gt[[i, j]] = r[j];
            }
        }
        let flat = ops::reshape(&layer.boxes, &[b_n * q_n, 4]);
        let matched = ops::gather_rows(&flat, &rows);
        let w = Arr::ones(IxDyn(&[rows.len(), 4]));
        let l1 = ops::scale(&ops::l1_sum(&matched, &gt, &w), SET_LOSS_L1 / num_boxes);
        let gt_xy = {
            let mut a = Arr::zeros(IxDyn(&[rows.len(), 4]));
            for (i, r) in gt_rows.iter().enumerate() {
                let xy = cxcywh_to_xyxy(r);
                for j in 0..4 {
                    a[[i, j]] = xy[j];
                }
            }
            a
        };
        let giou = giou_pairs_xyxy(&cxcywh_to_xyxy_var(&matched), &Var::constant(gt_xy));
        let giou = ops::scale(&ops::sum_all(&one_minus(&giou)), SET_LOSS_GIOU / num_boxes);
        reg_value += l1.item() + giou.item();
        terms.push(l1);
        terms.push(giou);
    }
    let refs: Vec<(f64, &Var)> = terms.iter().map(|t| (1.0, t)).collect();
    Ok(GtLoss {
        total: ops::weighted_sum(&refs),
        cls: cls_value,
        reg: reg_value,
        assignments: GtAssignments::Set(matches.last().unwrap().clone()),
    })
}

/// Match and compute the set-prediction ground-truth loss in one call.
pub fn set_gt_loss(outputs: &SetOutputs, targets: &[Targets]) -> Result<GtLoss> {
    let matches = set_gt_matches(outputs, targets, &MatchWeights::default())?;
    set_gt_loss_with_matches(outputs, targets, &matches)
}

// ---------------------------------------------------------------------------
// Dense head: flattened view and losses
// ---------------------------------------------------------------------------

/// Dense-head outputs with all scales flattened into one anchor axis, plus
/// the anchor geometry needed for assignment and decoding.
pub struct FlatDense {
    /// `[B, A, K]` class logits.
    pub cls: Var,
    /// `[B, A, 4·bins]` edge-distribution logits (edge-major bin groups).
    pub reg: Var,
    /// `[B, A, 4]` decoded pixel `xyxy` boxes (differentiable).
    pub boxes: Var,
    /// `[A, 2]` pixel anchor centers.
    pub centers: Arr,
    /// Stride of each anchor.
    pub anchor_strides: Vec<f64>,
    pub bins: usize,
    /// Input image size `(height, width)` implied by the grids.
    pub img_hw: (usize, usize),
}

/// Flatten per-scale dense outputs into `[B, A, ·]` tensors with anchors in
/// scale order (all of scale 0, then scale 1, ...).
pub fn flatten_dense(outputs: &DenseOutputs, bins: usize) -> FlatDense {
    assert!(!outputs.scales.is_empty(), "flatten_dense: no scales");
    let mut cls_parts = Vec::new();
    let mut reg_parts = Vec::new();
    let mut box_parts = Vec::new();
    let mut centers_rows: Vec<f64> = Vec::new();
    let mut anchor_strides = Vec::new();
    let s0 = &outputs.scales[0];
    let img_hw = (s0.cls.shape()[2] * s0.stride, s0.cls.shape()[3] * s0.stride);
    for s in &outputs.scales {
        let sh = s.cls.shape().to_vec();
        let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
        assert_eq!(s.reg.shape()[1], 4 * bins, "flatten_dense: reg channels");
        let c = ops::reshape(&s.cls, &[b, k, h * w]);
        cls_parts.push(ops::permute(&c, &[0, 2, 1]));
        let r = ops::reshape(&s.reg, &[b, 4 * bins, h * w]);
        reg_parts.push(ops::permute(&r, &[0, 2, 1]));
        let dist = dfl_expectation(&s.reg, bins);
        box_parts.push(decode_ltrb(&dist, h, w, s.stride));
        let cen = crate::model::posenc::grid_centers(h, w, s.stride);
        centers_rows.extend(cen.iter().cloned());
        anchor_strides.extend(std::iter::repeat(s.stride as f64).take(h * w));
    }
    let cat = |parts: &[Var]| {
        let refs: Vec<&Var> = parts.iter().collect();
        ops::concat(1, &refs)
    };
    let a_n = anchor_strides.len();
    FlatDense {
        cls: cat(&cls_parts),
        reg: cat(&reg_parts),
        boxes: cat(&box_parts),
        centers: Arr::from_shape_vec(IxDyn(&[a_n, 2]), centers_rows).unwrap(),
        anchor_strides,
        bins,
        img_hw,
    }
}

/// Task-aligned assignment for every image of a flattened dense batch, from
/// the batch's own (detached) predictions.
pub fn dense_assignments(flat: &FlatDense, targets: &[Targets]) -> Result<Vec<AnchorAssignment>> {
    let cls_v = flat.cls.value();
    let box_v = flat.boxes.value();
    let sh = flat.cls.shape().to_vec();
    let (b_n, a_n, k_n) = (sh[0], sh[1], sh[2]);
    if targets.len() != b_n {
        return Err(Error::Invalid(format!(
            "{} target sets for batch of {b_n}",
            targets.len()
        )));
    }
    let mut out = Vec::with_capacity(b_n);
    for (b, t) in targets.iter().enumerate() {
        let mut scores = Arr::zeros(IxDyn(&[a_n, k_n]));
        for a in 0..a_n {
            for k in 0..k_n {
                scores[[a, k]] = 1.0 / (1.0 + (-cls_v[[b, a, k]]).exp());
            }
        }
        let boxes = box_v.index_axis(Axis(0), b).to_owned().into_dyn();
        out.push(tal_assign(
            &scores,
            &boxes,
            &flat.centers,
            &t.classes,
            &t.boxes_xyxy_px(flat.img_hw),
        )?);
    }
    Ok(out)
}

/// Dense ground-truth loss: alignment-weighted BCE over all anchors, CIoU and
/// edge-distribution cross-entropy over foreground anchors. Terms are
/// normalized by the batch's total alignment mass, the edge term additionally
/// averaging its four edges.
///
/// The CIoU aspect coefficients are recomputed from the current predictions
/// and held constant during backpropagation.
pub fn dense_gt_loss_with_assignments(
    flat: &FlatDense,
    targets: &[Targets],
    assigns: &[AnchorAssignment],
) -> Result<GtLoss> {
    dense_gt_loss_impl(flat, targets, assigns, None)
}

/// [`dense_gt_loss_with_assignments`] with the CIoU aspect coefficients
/// pinned: one `[N, 1]` row per foreground anchor, images in batch order and
/// anchors ascending within each image. Gradient checks probe this form,
/// since the pinned function is what the backward pass differentiates.
pub fn dense_gt_loss_pinned_alpha(
    flat: &FlatDense,
    targets: &[Targets],
    assigns: &[AnchorAssignment],
    alpha: &Arr,
) -> Result<GtLoss> {
    dense_gt_loss_impl(flat, targets, assigns, Some(alpha))
}

fn dense_gt_loss_impl(
    flat: &FlatDense,
    targets: &[Targets],
    assigns: &[AnchorAssignment],
    pinned_alpha: Option<&Arr>,
) -> Result<GtLoss> {
    let sh = flat.cls.shape().to_vec();
    let (b_n, a_n, k_n) = (sh[0], sh[1], sh[2]);
    if targets.len() != b_n || assigns.len() != b_n {
        return Err(Error::Invalid("targets/assignments must match the batch".into()));
    }
    let norm = assigns
        .iter()
        .flat_map(|a| a.alignment.values())
        .sum::<f64>()
        .max(1.0);

    // Soft classification targets: the assigned class carries the alignment
    // score, everything else is background.
    let mut cls_t = Arr::zeros(IxDyn(&[b_n, a_n, k_n]));
    let mut rows: Vec<usize> = Vec::new();
    let mut row_w: Vec<f64> = Vec::new();
    let mut gt_xy_rows: Vec<[f64; 4]> = Vec::new();
    for (b, (asg, t)) in assigns.iter().zip(targets).enumerate() {
        let gt_px = t.boxes_xyxy_px(flat.img_hw);
        for &a in &asg.foreground {
            let o = asg.target_of[&a];
            let t_hat = asg.alignment[&a];
            cls_t[[b, a, t.classes[o]]] = t_hat;
            rows.push(b * a_n + a);
            row_w.push(t_hat);
            gt_xy_rows.push([gt_px[[o, 0]], gt_px[[o, 1]], gt_px[[o, 2]], gt_px[[o, 3]]]);
        }
    }
    let ones = Arr::ones(IxDyn(&[b_n, a_n, k_n]));
    let cls = ops::scale(
        &ops::bce_with_logits_sum(&flat.cls, &cls_t, &ones),
        DENSE_LOSS_CLS / norm,
    );
    let cls_value = cls.item();
    let mut terms = vec![cls];
    let mut reg_value = 0.0;

    if !rows.is_empty() {
        let n = rows.len();
        let mut gt = Arr::zeros(IxDyn(&[n, 4]));
        for (i, r) in gt_xy_rows.iter().enumerate() {
            for j in 0..4 {
                gt[[i, j]] = r[j];
            }
        }
        let boxes = ops::gather_rows(&ops::reshape(&flat.boxes, &[b_n * a_n, 4]), &rows);
        let ciou = match pinned_alpha {
            Some(a) => {
                if a.shape() != [n, 1] {
                    return Err(Error::Invalid(format!(
                        "pinned alpha must be [{n}, 1], got {:?}",
                        a.shape()
                    )));
                }
                ciou_loss_pairs_given_alpha(&boxes, &Var::constant(gt.clone()), a)
            }
            None => ciou_loss_pairs_xyxy(&boxes, &Var::constant(gt.clone())),
        };
        let w_col = Arr::from_shape_vec(IxDyn(&[n, 1]), row_w.clone()).unwrap();
        let box_term = ops::scale(
            &ops::sum_all(&ops::mul(&ciou, &Var::constant(w_col))),
            DENSE_LOSS_BOX / norm,
        );

        // Edge-distribution targets: ltrb distances from each anchor center
        // in units of its stride, two-hot encoded over the bins.
        let mut left = Vec::with_capacity(4 * n);
        let mut frac = Vec::with_capacity(4 * n);
        let mut edge_w = Vec::with_capacity(4 * n);
        for (i, &r) in rows.iter().enumerate() {
            let a = r % a_n;
            let (cx, cy) = (flat.centers[[a, 0]], flat.centers[[a, 1]]);
            let s = flat.anchor_strides[a];
            let g = &gt_xy_rows[i];
            let max_d = (flat.bins - 1) as f64 - 1e-3;
            for d in [
                (cx - g[0]) / s,
                (cy - g[1]) / s,
                (g[2] - cx) / s,
                (g[3] - cy) / s,
            ] {
                let d = d.clamp(0.0, max_d);
                let l = d.floor();
                left.push(l as usize);
                frac.push(d - l);
                edge_w.push(row_w[i] / 4.0);
            }
        }
        let reg_rows = ops::gather_rows(&ops::reshape(&flat.reg, &[b_n * a_n, 4 * flat.bins]), &rows);
        let reg_rows = ops::reshape(&reg_rows, &[4 * n, flat.bins]);
        let dfl = ops::scale(
            &ops::dfl_ce_sum(&reg_rows, &left, &frac, &edge_w),
            DENSE_LOSS_DFL / norm,
        );
        reg_value = box_term.item() + dfl.item();
        terms.push(box_term);
        terms.push(dfl);
    }
    let refs: Vec<(f64, &Var)> = terms.iter().map(|t| (1.0, t)).collect();
    Ok(GtLoss {
        total: ops::weighted_sum(&refs),
        cls: cls_value,
        reg: reg_value,
        assignments: GtAssignments::Dense(assigns.to_vec()),
    })
}

/// Assign and compute the dense ground-truth loss in one call.
pub fn dense_gt_loss(flat: &FlatDense, targets: &[Targets]) -> Result<GtLoss> {
    let assigns = dense_assignments(flat, targets)?;
    dense_gt_loss_with_assignments(flat, targets, &assigns)
}

// ---------------------------------------------------------------------------
// Distillation terms
// ---------------------------------------------------------------------------

/// The four distilled quantities of the base-network pass.
#[derive(Clone)]
pub struct KdTerms {
    pub cls: Var,
    pub reg_iou: Var,
    pub reg_edge: Var,
    pub feat: Var,
}

/// Mean temperature-scaled KL from the teacher's class distribution to the
/// student's over pre-gathered `[N, K]` logit rows. Empty input → 0.
pub fn kd_cls_loss(student_rows: &Var, teacher_rows: &Arr, temp: f64) -> Var {
    let n = student_rows.shape()[0];
    if n == 0 {
        return Var::scalar(0.0);
    }
    ops::kl_softmax_sum(student_rows, teacher_rows, temp, &vec![1.0 / n as f64; n])
}

fn take_rows3(x: &Arr, a_n: usize, rows: &[usize]) -> Arr {
    let d = x.shape()[2];
    let mut out = Arr::zeros(IxDyn(&[rows.len(), d]));
    for (i, &r) in rows.iter().enumerate() {
        let (b, a) = (r / a_n, r % a_n);
        for j in 0..d {
            out[[i, j]] = x[[b, a, j]];
        }
    }
    out
}

/// Set-prediction distillation: (classification KL, box-overlap, coordinate
/// L1) over the student's matched queries, each paired with the teacher query
/// that matched the same object. Returns the three per-pair means.
pub fn kd_set_terms(
    student: &SetOutputs,
    student_matches: &[MatchResult],
    teacher_logits: &Arr,
    teacher_boxes: &Arr,
    teacher_matches: &[MatchResult],
    t_cls: f64,
) -> Result<(Var, Var, Var)> {
    let exit = student.exit_layer();
    let sh = exit.logits.shape().to_vec();
    let (b_n, q_n, _k_n) = (sh[0], sh[1], sh[2]);
    if student_matches.len() != b_n || teacher_matches.len() != b_n {
        return Err(Error::Invalid("one match per image required".into()));
    }
    let mut student_rows: Vec<usize> = Vec::new();
    let mut teacher_rows: Vec<usize> = Vec::new();
    for b in 0..b_n {
        let map = align_teacher_queries(&teacher_matches[b], &student_matches[b])?;
        for (q_s, q_t) in map {
            student_rows.push(b * q_n + q_s);
            teacher_rows.push(b * q_n + q_t);
        }
    }
    let n = student_rows.len();
    if n == 0 {
        return Ok((Var::scalar(0.0), Var::scalar(0.0), Var::scalar(0.0)));
    }
    let s_logits = ops::gather_rows(&ops::reshape(&exit.logits, &[b_n * q_n, sh[2]]), &student_rows);
    let t_logits = take_rows3(teacher_logits, q_n, &teacher_rows);
    let cls = kd_cls_loss(&s_logits, &t_logits, t_cls);

    let s_boxes = ops::gather_rows(&ops::reshape(&exit.boxes, &[b_n * q_n, 4]), &student_rows);
    let t_boxes = take_rows3(teacher_boxes, q_n, &teacher_rows);
    let mut t_xy = Arr::zeros(IxDyn(&[n, 4]));
    for i in 0..n {
        let xy = cxcywh_to_xyxy(&[t_boxes[[i, 0]], t_boxes[[i, 1]], t_boxes[[i, 2]], t_boxes[[i, 3]]]);
        for j in 0..4 {
            t_xy[[i, j]] = xy[j];
        }
    }
    let giou = giou_pairs_xyxy(&cxcywh_to_xyxy_var(&s_boxes), &Var::constant(t_xy));
    let iou_term = ops::scale(&ops::sum_all(&one_minus(&giou)), 1.0 / n as f64);
    let w = Arr::from_elem(IxDyn(&[n, 4]), 1.0 / n as f64);
    let edge_term = ops::l1_sum(&s_boxes, &t_boxes, &w);
    Ok((cls, iou_term, edge_term))
}

/// Dense distillation over the valid anchor set (anchors foreground for both
/// networks with agreeing targets, minus conflicts): classification KL,
/// box-overlap on decoded boxes, and bin-distribution KL averaged over the
/// four edges. Returns the three means over the valid set.
#[allow(clippy::too_many_arguments)]
pub fn kd_dense_terms(
    student: &FlatDense,
    student_assigns: &[AnchorAssignment],
    teacher_cls: &Arr,
    teacher_boxes: &Arr,
    teacher_reg: &Arr,
    teacher_assigns: &[AnchorAssignment],
    t_cls: f64,
    t_dfl: f64,
) -> Result<(Var, Var, Var)> {
    let sh = student.cls.shape().to_vec();
    let (b_n, a_n, k_n) = (sh[0], sh[1], sh[2]);
    if student_assigns.len() != b_n || teacher_assigns.len() != b_n {
        return Err(Error::Invalid("one assignment per image required".into()));
    }
    let mut rows: Vec<usize> = Vec::new();
    for b in 0..b_n {
        let sets = kd_anchor_sets(&teacher_assigns[b], &student_assigns[b]);
        rows.extend(sets.valid.iter().map(|&a| b * a_n + a));
    }
    let n = rows.len();
    if n == 0 {
        return Ok((Var::scalar(0.0), Var::scalar(0.0), Var::scalar(0.0)));
    }
    let s_cls = ops::gather_rows(&ops::reshape(&student.cls, &[b_n * a_n, k_n]), &rows);
    let cls = kd_cls_loss(&s_cls, &take_rows3(teacher_cls, a_n, &rows), t_cls);

    let s_boxes = ops::gather_rows(&ops::reshape(&student.boxes, &[b_n * a_n, 4]), &rows);
    let giou = giou_pairs_xyxy(&s_boxes, &Var::constant(take_rows3(teacher_boxes, a_n, &rows)));
    let iou_term = ops::scale(&ops::sum_all(&one_minus(&giou)), 1.0 / n as f64);

    let bins = student.bins;
    let s_reg = ops::gather_rows(&ops::reshape(&student.reg, &[b_n * a_n, 4 * bins]), &rows);
    let s_reg = ops::reshape(&s_reg, &[4 * n, bins]);
    let t_reg = take_rows3(teacher_reg, a_n, &rows)
        .into_shape_with_order(IxDyn(&[4 * n, bins]))
        .unwrap();
    let edge_term = ops::kl_softmax_sum(&s_reg, &t_reg, t_dfl, &vec![1.0 / (4 * n) as f64; 4 * n]);
    Ok((cls, iou_term, edge_term))
}

// ---------------------------------------------------------------------------
// Feature distillation
// ---------------------------------------------------------------------------

/// A stage's boundary features from both passes: the student side on the
/// tape, the teacher side frozen.
pub struct FeatPair {
    pub stage_id: String,
    pub student: Var,
    pub teacher: Arr,
}

/// Value-level GAP + row normalization, mirroring the student pipeline
/// exactly so identical features give exactly zero loss.
fn gap_normalized(x: &Arr, eps: f64) -> Arr {
    let sh = x.shape();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let area = (h * w) as f64;
    let mut out = Arr::zeros(IxDyn(&[b, c]));
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x[[bi, ci, i, j]];
                }
            }
            out[[bi, ci]] = s / area;
        }
    }
    for bi in 0..b {
        let nrm = (0..c).map(|ci| out[[bi, ci]] * out[[bi, ci]]).sum::<f64>();
        let nrm = (nrm + eps).sqrt();
        for ci in 0..c {
            out[[bi, ci]] /= nrm;
        }
    }
    out
}

/// Pooled-feature distillation over the supervised stages: per stage, global
/// average pool both sides to `[B, C]`, ℓ2-normalize each sample, and take
/// the batch-mean squared distance (equal to `2·(1 − cosine)` up to the
/// normalizer's ε). Stage losses are weighted by their group's weight and
/// averaged over the supervised set.
pub fn kd_feat_loss(pairs: &[FeatPair], hyper: &KDHyper, arch: &ArchSpec) -> Result<Var> {
    if hyper.supervised_stages.is_empty() {
        return Ok(Var::scalar(0.0));
    }
    let inv_count = 1.0 / hyper.supervised_stages.len() as f64;
    let mut terms: Vec<(f64, Var)> = Vec::new();
    for id in &hyper.supervised_stages {
        let pair = pairs
            .iter()
            .find(|p| &p.stage_id == id)
            .ok_or_else(|| Error::Invalid(format!("no boundary features for stage {id}")))?;
        let group = arch
            .stage_group(id)
            .ok_or_else(|| Error::Invalid(format!("stage {id} not in the architecture")))?;
        let w = *hyper
            .feat_weights
            .get(group)
            .ok_or_else(|| Error::Invalid(format!("no feature weight for group {group}")))?;
        let b = pair.student.shape()[0];
        if pair.teacher.shape() != pair.student.shape() {
            return Err(Error::Invalid(format!("stage {id}: student/teacher shape mismatch")));
        }
        let s = ops::normalize_rows(&ops::global_avg_pool(&pair.student), FEAT_EPS);
        let t = Var::constant(gap_normalized(&pair.teacher, FEAT_EPS));
        let d = ops::sub(&s, &t);
        let sq = ops::scale(&ops::sum_all(&ops::mul(&d, &d)), 1.0 / b as f64);
        terms.push((w * inv_count, sq));
    }
    let refs: Vec<(f64, &Var)> = terms.iter().map(|(c, v)| (*c, v)).collect();
    Ok(ops::weighted_sum(&refs))
}

/// Spatial variant for analysis: normalize each location's channel vector
/// instead of pooling, and average the squared distances over batch and
/// locations.
pub fn kd_feat_spatial_loss(student: &Var, teacher: &Arr) -> Var {
    let sh = student.shape().to_vec();
    assert_eq!(sh.len(), 4, "kd_feat_spatial_loss: expected NCHW");
    assert_eq!(teacher.shape(), &sh[..], "kd_feat_spatial_loss: teacher shape");
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let rows = b * h * w;
    let s = ops::reshape(&ops::permute(student, &[0, 2, 3, 1]), &[rows, c]);
    let s = ops::normalize_rows(&s, FEAT_EPS);
    let mut t = Arr::zeros(IxDyn(&[rows, c]));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let r = (bi * h + i) * w + j;
                let nrm = (0..c).map(|ci| teacher[[bi, ci, i, j]].powi(2)).sum::<f64>();
                let nrm = (nrm + FEAT_EPS).sqrt();
                for ci in 0..c {
                    t[[r, ci]] = teacher[[bi, ci, i, j]] / nrm;
                }
            }
        }
    }
    let d = ops::sub(&s, &Var::constant(t));
    ops::scale(&ops::sum_all(&ops::mul(&d, &d)), 1.0 / rows as f64)
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// A scalar objective with its per-term values for logging.
#[derive(Clone)]
pub struct LossBreakdown {
    pub total: Var,
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn value(&self) -> f64 {
        self.total.item()
    }
}

/// The base-network (distilled pass) objective:
/// `α·L_gt + (1−α)·(w_cls_kd·L_cls + w_iou_kd·L_iou + w_edge_kd·L_edge + L_feat)`.
///
/// With `α = 1`, or without distillation terms, the result *is* the
/// ground-truth loss node — bit-identical to plain supervised training, not
/// merely numerically close.
pub fn base_total_loss(gt: &GtLoss, kd: Option<&KdTerms>, hyper: &KDHyper) -> LossBreakdown {
    let mut components = BTreeMap::from([
        ("gt_cls".to_string(), gt.cls),
        ("gt_reg".to_string(), gt.reg),
        ("kd_cls".to_string(), 0.0),
        ("kd_reg_iou".to_string(), 0.0),
        ("kd_reg_edge".to_string(), 0.0),
        ("kd_feat".to_string(), 0.0),
    ]);
    let total = match kd {
        None => gt.total.clone(),
        Some(_) if hyper.alpha == 1.0 => gt.total.clone(),
        Some(kd) => {
            components.insert("kd_cls".to_string(), kd.cls.item());
            components.insert("kd_reg_iou".to_string(), kd.reg_iou.item());
            components.insert("kd_reg_edge".to_string(), kd.reg_edge.item());
            components.insert("kd_feat".to_string(), kd.feat.item());
            let a = hyper.alpha;
            let k = 1.0 - a;
            ops::weighted_sum(&[
                (a, &gt.total),
                (k * hyper.w_cls_kd, &kd.cls),
                (k * hyper.w_iou_kd, &kd.reg_iou),
                (k * hyper.w_edge_kd, &kd.reg_edge),
                (k, &kd.feat),
            ])
        }
    };
    LossBreakdown { total, components }
}
