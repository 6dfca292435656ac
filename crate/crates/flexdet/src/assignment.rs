//! Prediction–target assignment.
//!
//! The set-prediction path matches queries to ground-truth objects with a
//! globally optimal bipartite matcher; the dense path scores anchors with a
//! task-alignment metric and keeps each ground truth's best candidates. Both
//! teacher and student passes produce assignments, and the distillation
//! losses need the two reconciled: queries are reordered so student and
//! teacher talk about the same object, and anchors on which the two passes
//! disagree about the target are dropped from distillation.

use crate::{Error, Result};
use ndarray::Ix2;
use std::collections::BTreeMap;

/// Injective query→target matching with its total cost. Every ground truth
/// is matched (the matcher requires at least as many queries as targets).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub sigma: BTreeMap<usize, usize>,
    pub cost: f64,
}

/// Largest target count the bitmask matcher accepts; beyond this the DP
/// table stops being cheap and scenes that big do not occur here.
pub const MAX_MATCH_TARGETS: usize = 16;

/// Cost weights for the set-prediction matcher.
#[derive(Clone, Copy, Debug)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights {
            cls: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Minimum-cost injective assignment of all `G` columns (targets) to the `Q`
/// rows (queries) of `cost`; among equal-cost optima, the lexicographically
/// smallest assignment vector (queries in index order, matched target index,
/// unmatched sorting last) wins.
///
/// Exact dynamic program over target subsets: O(Q · 2^G · G).
pub fn hungarian_match(cost: &crate::nn::Arr) -> Result<MatchResult> {
    let cost = cost
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("cost matrix must be 2-d".into()))?;
    let (q_n, g_n) = (cost.shape()[0], cost.shape()[1]);
    if g_n == 0 {
        return Ok(MatchResult {
            sigma: BTreeMap::new(),
            cost: 0.0,
        });
    }
    if q_n < g_n {
        return Err(Error::Invalid(format!(
            "infeasible matching: {q_n} queries for {g_n} targets"
        )));
    }
    if g_n > MAX_MATCH_TARGETS {
        return Err(Error::Invalid(format!(
            "matching supports at most {MAX_MATCH_TARGETS} targets, got {g_n}"
        )));
    }

    let full: usize = (1 << g_n) - 1;
    // dp[q][mask]: cheapest way to cover the targets NOT in `mask` using
    // queries q.., given that `mask` is already assigned.
    let mut dp = vec![vec![f64::INFINITY; full + 1]; q_n + 1];
    dp[q_n][full] = 0.0;
    for q in (0..q_n).rev() {
        for mask in 0..=full {
            let missing = g_n - (mask as u32).count_ones() as usize;
            if missing > q_n - q {
                continue; // not enough queries left
            }
            let mut best = dp[q + 1][mask]; // leave query q unmatched
            for j in 0..g_n {
                if mask & (1 << j) == 0 {
                    let cand = cost[[q, j]] + dp[q + 1][mask | (1 << j)];
                    if cand < best {
                        best = cand;
                    }
                }
            }
            dp[q][mask] = best;
        }
    }

    // Traceback, preferring a match (smallest target first) over skipping:
    // that order realizes the lexicographically smallest assignment vector.
    let mut sigma = BTreeMap::new();
    let mut mask = 0usize;
    for q in 0..q_n {
        let here = dp[q][mask];
        let mut taken = false;
        for j in 0..g_n {
            if mask & (1 << j) == 0 && cost[[q, j]] + dp[q + 1][mask | (1 << j)] == here {
                sigma.insert(q, j);
                mask |= 1 << j;
                taken = true;
                break;
            }
        }
        if !taken {
            debug_assert_eq!(dp[q + 1][mask], here);
        }
        if mask == full {
            break;
        }
    }
    Ok(MatchResult {
        sigma,
        cost: dp[0][0],
    })
}

/// Reference matcher: exhaustive search over every injective assignment,
/// with the same cost accumulation order and tie-breaking as
/// [`hungarian_match`]. Exponential — for small problems and for testing the
/// fast matcher against.
pub fn exhaustive_match(cost: &crate::nn::Arr) -> Result<MatchResult> {
    let cost = cost
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("cost matrix must be 2-d".into()))?;
    let (q_n, g_n) = (cost.shape()[0], cost.shape()[1]);
    if g_n == 0 {
        return Ok(MatchResult {
            sigma: BTreeMap::new(),
            cost: 0.0,
        });
    }
    if q_n < g_n {
        return Err(Error::Invalid(format!(
            "infeasible matching: {q_n} queries for {g_n} targets"
        )));
    }

    // Pass 1: cheapest total over all complete assignments, accumulating
    // suffix-style (cost[q][j] + rest) like the DP does so equal optima
    // compare bitwise-equal later.
    fn min_cost(cost: &ndarray::ArrayView2<f64>, q: usize, used: &mut [bool]) -> Option<f64> {
        let (q_n, g_n) = (cost.shape()[0], cost.shape()[1]);
        if q == q_n {
            return used.iter().all(|u| *u).then_some(0.0);
        }
        if used.iter().filter(|u| !**u).count() > q_n - q {
            return None;
        }
        let mut best: Option<f64> = None;
        for j in 0..g_n {
            if used[j] {
                continue;
            }
            used[j] = true;
            if let Some(rest) = min_cost(cost, q + 1, used) {
                let total = cost[[q, j]] + rest;
                if best.is_none_or(|b| total < b) {
                    best = Some(total);
                }
            }
            used[j] = false;
        }
        if let Some(rest) = min_cost(cost, q + 1, used) {
            if best.is_none_or(|b| rest < b) {
                best = Some(rest);
            }
        }
        best
    }

    // Pass 2: commit choices left to right, at each query recomputing the
    // best achievable suffix and taking the first choice (targets ascending,
    // then unmatched) that attains it. `min_cost` is deterministic and the
    // comparison re-evaluates the exact expression the minimum was taken
    // over, so the float equality is exact — no subtraction involved.
    fn commit(
        cost: &ndarray::ArrayView2<f64>,
        q: usize,
        used: &mut [bool],
        sigma: &mut BTreeMap<usize, usize>,
    ) {
        let (q_n, g_n) = (cost.shape()[0], cost.shape()[1]);
        if q == q_n {
            return;
        }
        let here = min_cost(cost, q, used).expect("suffix stays feasible");
        for j in 0..g_n {
            if used[j] {
                continue;
            }
            used[j] = true;
            if let Some(rest) = min_cost(cost, q + 1, used) {
                if cost[[q, j]] + rest == here {
                    sigma.insert(q, j);
                    commit(cost, q + 1, used, sigma);
                    return;
                }
            }
            used[j] = false;
        }
        debug_assert_eq!(min_cost(cost, q + 1, used), Some(here));
        commit(cost, q + 1, used, sigma);
    }

    let mut used = vec![false; g_n];
    let best_cost = min_cost(&cost, 0, &mut used).expect("feasible by the Q >= G check");
    let mut sigma = BTreeMap::new();
    commit(&cost, 0, &mut used, &mut sigma);
    Ok(MatchResult {
        sigma,
        cost: best_cost,
    })
}

/// `(cx, cy, w, h)` → `(x1, y1, x2, y2)`.
pub fn cxcywh_to_xyxy(b: &[f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

/// Generalized IoU of two `xyxy` boxes, in `[-1, 1]`.
pub fn giou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ex = a[2].max(b[2]) - a[0].min(b[0]);
    let ey = a[3].max(b[3]) - a[1].min(b[1]);
    let enclose = ex * ey;
    if enclose > 0.0 {
        iou - (enclose - union) / enclose
    } else {
        iou
    }
}

fn row4(a: &ndarray::ArrayView2<f64>, i: usize) -> [f64; 4] {
    [a[[i, 0]], a[[i, 1]], a[[i, 2]], a[[i, 3]]]
}

/// Match queries to ground truths by prediction quality: per pair, cost =
/// `w_cls · (−score of the target class) + w_l1 · ‖box − gt‖₁ +
/// w_giou · (1 − GIoU)`. `logits: [Q, K]` (pre-sigmoid), `boxes: [Q, 4]`
/// normalized `(cx, cy, w, h)`, ground truth likewise.
pub fn detr_assign(
    logits: &crate::nn::Arr,
    boxes: &crate::nn::Arr,
    gt_classes: &[usize],
    gt_boxes: &crate::nn::Arr,
    weights: &MatchWeights,
) -> Result<MatchResult> {
    if gt_classes.is_empty() {
        return Ok(MatchResult {
            sigma: BTreeMap::new(),
            cost: 0.0,
        });
    }
    let logits = logits
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("logits must be [Q, K]".into()))?;
    let boxes = boxes
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("boxes must be [Q, 4]".into()))?;
    let gt_boxes = gt_boxes
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("gt boxes must be [G, 4]".into()))?;
    let (q_n, k_n) = (logits.shape()[0], logits.shape()[1]);
    let g_n = gt_classes.len();
    if gt_boxes.shape() != [g_n, 4] {
        return Err(Error::Invalid("gt boxes/classes length mismatch".into()));
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= k_n) {
        return Err(Error::Invalid(format!("gt class {c} out of range")));
    }

    let mut cost = crate::nn::Arr::zeros(ndarray::IxDyn(&[q_n, g_n]));
    for q in 0..q_n {
        let bq = row4(&boxes, q);
        let bq_xy = cxcywh_to_xyxy(&bq);
        for j in 0..g_n {
            let score = 1.0 / (1.0 + (-logits[[q, gt_classes[j]]]).exp());
            let bg = row4(&gt_boxes, j);
            let l1: f64 = bq.iter().zip(bg.iter()).map(|(a, b)| (a - b).abs()).sum();
            let giou = giou_xyxy(&bq_xy, &cxcywh_to_xyxy(&bg));
            cost[[q, j]] =
                weights.cls * (-score) + weights.l1 * l1 + weights.giou * (1.0 - giou);
        }
    }
    hungarian_match(&cost)
}

/// Reorder teacher queries onto student queries through the object they
/// matched: for each ground truth `o`, the student query matched to `o` maps
/// to the teacher query matched to `o`. Both matches must cover the same
/// ground truths.
pub fn align_teacher_queries(
    teacher: &MatchResult,
    student: &MatchResult,
) -> Result<BTreeMap<usize, usize>> {
    let mut teacher_of_gt = BTreeMap::new();
    for (&q, &o) in &teacher.sigma {
        teacher_of_gt.insert(o, q);
    }
    let mut map = BTreeMap::new();
    for (&q_student, &o) in &student.sigma {
        let q_teacher = teacher_of_gt.get(&o).ok_or_else(|| {
            Error::Invalid(format!("teacher match is missing ground truth {o}"))
        })?;
        map.insert(q_student, *q_teacher);
    }
    Ok(map)
}

/// Dense-head anchor assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    /// Sorted foreground anchor indices.
    pub foreground: Vec<usize>,
    /// anchor → ground-truth index, for every foreground anchor.
    pub target_of: BTreeMap<usize, usize>,
    /// anchor → alignment score, normalized per ground truth so the best
    /// candidate's target equals that ground truth's best IoU.
    pub alignment: BTreeMap<usize, f64>,
}

pub const TAL_TOPK: usize = 4;
pub const TAL_ALPHA: f64 = 1.0;
pub const TAL_BETA: f64 = 6.0;

/// Task-aligned assignment: per (anchor, gt) alignment
/// `score[class_gt]^α · IoU^β`, restricted to anchors whose center lies
/// inside the gt box; each gt keeps its top-k anchors; an anchor claimed by
/// several gts goes to the one aligning best (ties to the lower index).
///
/// `scores: [A, K]` post-sigmoid class scores, `pred_boxes: [A, 4]` and
/// `gt_boxes: [G, 4]` pixel `xyxy`, `centers: [A, 2]` pixel anchor centers.
pub fn tal_assign(
    scores: &crate::nn::Arr,
    pred_boxes: &crate::nn::Arr,
    centers: &crate::nn::Arr,
    gt_classes: &[usize],
    gt_boxes: &crate::nn::Arr,
) -> Result<AnchorAssignment> {
    let scores = scores
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("scores must be [A, K]".into()))?;
    let pred_boxes = pred_boxes
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("pred boxes must be [A, 4]".into()))?;
    let centers = centers
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("centers must be [A, 2]".into()))?;
    let gt_boxes = gt_boxes
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Invalid("gt boxes must be [G, 4]".into()))?;
    let a_n = scores.shape()[0];
    let g_n = gt_classes.len();

    // Raw alignment per gt, zero outside the center-inside constraint.
    let mut align = vec![vec![0.0f64; a_n]; g_n];
    let mut iou = vec![vec![0.0f64; a_n]; g_n];
    for j in 0..g_n {
        let gb = row4(&gt_boxes, j);
        for a in 0..a_n {
            let (cx, cy) = (centers[[a, 0]], centers[[a, 1]]);
            if cx <= gb[0] || cx >= gb[2] || cy <= gb[1] || cy >= gb[3] {
                continue;
            }
            let i = crate::model::iou_xyxy(&row4(&pred_boxes, a), &gb);
            iou[j][a] = i;
            let s = scores[[a, gt_classes[j]]].clamp(0.0, 1.0);
            align[j][a] = s.powf(TAL_ALPHA) * i.powf(TAL_BETA);
        }
    }

    // Top-k candidates per gt (alignment desc, anchor index asc).
    let mut claims: BTreeMap<usize, (usize, f64)> = BTreeMap::new(); // anchor → (gt, align)
    for j in 0..g_n {
        let mut cands: Vec<usize> = (0..a_n).filter(|&a| align[j][a] > 0.0).collect();
        cands.sort_by(|&a, &b| align[j][b].total_cmp(&align[j][a]).then(a.cmp(&b)));
        cands.truncate(TAL_TOPK);
        for &a in &cands {
            let t = align[j][a];
            match claims.get(&a) {
                Some(&(_, existing)) if existing >= t => {}
                _ => {
                    claims.insert(a, (j, t));
                }
            }
        }
    }

    // Normalize alignment per gt over the anchors it finally owns: the best
    // claim scales to that gt's best owned IoU, keeping targets in [0, 1].
    let mut owned: Vec<Vec<usize>> = vec![Vec::new(); g_n];
    for (&a, &(j, _)) in &claims {
        owned[j].push(a);
    }
    let mut alignment = BTreeMap::new();
    for j in 0..g_n {
        if owned[j].is_empty() {
            continue;
        }
        let max_align = owned[j]
            .iter()
            .map(|&a| align[j][a])
            .fold(f64::MIN, f64::max);
        let max_iou = owned[j].iter().map(|&a| iou[j][a]).fold(f64::MIN, f64::max);
        for &a in &owned[j] {
            let norm = if max_align > 0.0 {
                align[j][a] / max_align * max_iou
            } else {
                0.0
            };
            alignment.insert(a, norm);
        }
    }

    let foreground: Vec<usize> = claims.keys().copied().collect();
    let target_of: BTreeMap<usize, usize> = claims.iter().map(|(&a, &(j, _))| (a, j)).collect();
    Ok(AnchorAssignment {
        foreground,
        target_of,
        alignment,
    })
}

/// Anchors where teacher and student assignments can support distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct KDAnchorSets {
    /// Foreground in both passes but assigned to different objects.
    pub conflict: Vec<usize>,
    /// Foreground in both passes with the same object.
    pub valid: Vec<usize>,
}

pub fn kd_anchor_sets(teacher: &AnchorAssignment, student: &AnchorAssignment) -> KDAnchorSets {
    let mut conflict = Vec::new();
    let mut valid = Vec::new();
    for &a in &teacher.foreground {
        if let Some(tb) = student.target_of.get(&a) {
            let tt = teacher.target_of[&a];
            if tt == *tb {
                valid.push(a);
            } else {
                conflict.push(a);
            }
        }
    }
    KDAnchorSets { conflict, valid }
}
