//! Detection heads: a query decoder with per-layer predictions, and a dense
//! per-anchor head with distribution-based box regression.

use crate::model::posenc;
use crate::nn::layers::{Conv2d, LayerNorm, Linear, ModalNorm, MultiHeadAttention, NormBranch, RunningStats};
use crate::nn::{ops, Arr, Param, Tape, Var};
use ndarray::IxDyn;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Initial bias for classification outputs: a low prior keeps early
/// background predictions cheap under the element-wise BCE.
const CLS_BIAS_INIT: f64 = -2.0;

/// One decoded box in pixels with its class and confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

/// Predictions of one decoder layer.
pub struct LayerPreds {
    /// `[B, Q, K]` class logits.
    pub logits: Var,
    /// `[B, Q, 4]` boxes as normalized `(cx, cy, w, h)` in `(0, 1)`.
    pub boxes: Var,
}

pub struct SetOutputs {
    /// Predictions of decoder layers `1..=exit`, in depth order.
    pub layers: Vec<LayerPreds>,
}

impl SetOutputs {
    pub fn exit_layer(&self) -> &LayerPreds {
        self.layers.last().expect("decoder ran at least one layer")
    }
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
    ln3: LayerNorm,
    cls: Linear,
    box1: Linear,
    box2: Linear,
}

impl DecoderLayer {
    fn new(name: &str, d: usize, heads: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let cls = Linear::new(&format!("{name}.cls"), d, num_classes, true, rng);
        cls.b.as_ref().unwrap().update(|a| a.fill(CLS_BIAS_INIT));
        DecoderLayer {
            self_attn: MultiHeadAttention::new(&format!("{name}.self"), d, heads, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross"), d, heads, rng),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
            ffn1: Linear::new(&format!("{name}.ffn1"), d, 2 * d, true, rng),
            ffn2: Linear::new(&format!("{name}.ffn2"), 2 * d, d, true, rng),
            ln3: LayerNorm::new(&format!("{name}.ln3"), d),
            cls,
            box1: Linear::new(&format!("{name}.box1"), d, d, true, rng),
            box2: Linear::new(&format!("{name}.box2"), d, 4, true, rng),
        }
    }

    /// `x: [B, Q, D]`, `memory: [B, T, D]` → updated x plus this layer's
    /// predictions.
    fn forward(&self, tape: &Tape, x: &Var, memory: &Var) -> (Var, LayerPreds) {
        let (b, q, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let sa = self.self_attn.forward(tape, x, x, x);
        let x = self.ln1.forward(tape, &ops::add(x, &sa));
        let ca = self.cross_attn.forward(tape, &x, memory, memory);
        let x = self.ln2.forward(tape, &ops::add(&x, &ca));
        let flat = ops::reshape(&x, &[b * q, d]);
        let ff = self.ffn2.forward(tape, &ops::silu(&self.ffn1.forward(tape, &flat)));
        let x = self.ln3.forward(tape, &ops::add(&x, &ops::reshape(&ff, &[b, q, d])));

        let flat = ops::reshape(&x, &[b * q, d]);
        let logits = ops::reshape(&self.cls.forward(tape, &flat), &[b, q, self.cls_dim()]);
        let hidden = ops::silu(&self.box1.forward(tape, &flat));
        let boxes = ops::sigmoid(&self.box2.forward(tape, &hidden));
        let boxes = ops::reshape(&boxes, &[b, q, 4]);
        (x, LayerPreds { logits, boxes })
    }

    fn cls_dim(&self) -> usize {
        self.cls.w.shape()[1]
    }

    fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        self.self_attn.collect_params(out);
        self.ln1.collect_params(out);
        self.cross_attn.collect_params(out);
        self.ln2.collect_params(out);
        self.ffn1.collect_params(out);
        self.ffn2.collect_params(out);
        self.ln3.collect_params(out);
        self.cls.collect_params(out);
        self.box1.collect_params(out);
        self.box2.collect_params(out);
    }
}

pub struct SetHead {
    query_embed: Rc<Param>,
    scale_embed: Rc<Param>,
    layers: Vec<DecoderLayer>,
    d_model: usize,
}

impl SetHead {
    pub fn new(
        d_model: usize,
        num_layers: usize,
        num_queries: usize,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> SetHead {
        let query_embed = Param::new(
            "dec.query_embed",
            crate::nn::init::normal(rng, &[num_queries, d_model], 0.5),
        );
        let scale_embed = Param::new(
            "dec.scale_embed",
            crate::nn::init::normal(rng, &[3, d_model], 0.5),
        );
        let layers = (1..=num_layers)
            .map(|i| DecoderLayer::new(&format!("dec.l{i}"), d_model, 4, num_classes, rng))
            .collect();
        SetHead {
            query_embed,
            scale_embed,
            layers,
            d_model,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flatten the three scale maps into one token sequence with position and
    /// scale encodings added.
    fn build_memory(&self, tape: &Tape, feats: &[Var]) -> Var {
        let d = self.d_model;
        let b = feats[0].shape()[0];
        let mut tokens = Vec::new();
        let mut pos_rows = Vec::new();
        let mut scale_idx = Vec::new();
        for (s, f) in feats.iter().enumerate() {
            let (h, w) = (f.shape()[2], f.shape()[3]);
            // [B, C, H, W] → [B, H·W, C]
            let t = ops::reshape(f, &[b, d, h * w]);
            tokens.push(ops::permute(&t, &[0, 2, 1]));
            pos_rows.push(posenc::sincos_2d(h, w, d));
            scale_idx.extend(std::iter::repeat_n(s, h * w));
        }
        let refs: Vec<&Var> = tokens.iter().collect();
        let memory = ops::concat(1, &refs);
        let t_total = memory.shape()[1];

        let mut pos = Arr::zeros(IxDyn(&[t_total, d]));
        let mut row = 0;
        for p in &pos_rows {
            for r in p.rows() {
                pos.index_axis_mut(ndarray::Axis(0), row).assign(&r);
                row += 1;
            }
        }
        // memory + pos + scale_embed[scale_of_token], batch-broadcast via the
        // flattened add_rows trick.
        let scale_rows = ops::gather_rows(&self.scale_embed.bind(tape), &scale_idx);
        let extras = ops::add(&scale_rows, &Var::constant(pos));
        let flat = ops::reshape(&memory, &[b, t_total * d]);
        let flat = ops::add_rows(&flat, &ops::reshape(&extras, &[t_total * d]));
        ops::reshape(&flat, &[b, t_total, d])
    }

    /// Run decoder layers `1..=exit`. Layer k's predictions do not depend on
    /// the exit depth, so any deeper run's prefix matches a shallower run
    /// exactly.
    pub fn forward(&self, tape: &Tape, feats: &[Var], exit: usize) -> SetOutputs {
        assert!((1..=self.layers.len()).contains(&exit), "exit {exit} out of range");
        let b = feats[0].shape()[0];
        let q = self.query_embed.shape()[0];
        let d = self.d_model;
        let memory = self.build_memory(tape, feats);

        let zeros = Var::constant(Arr::zeros(IxDyn(&[b, q * d])));
        let qe = self.query_embed.bind(tape);
        let x0 = ops::add_rows(&zeros, &ops::reshape(&qe, &[q * d]));
        let mut x = ops::reshape(&x0, &[b, q, d]);

        let mut layers = Vec::with_capacity(exit);
        for layer in self.layers.iter().take(exit) {
            let (nx, preds) = layer.forward(tape, &x, &memory);
            x = nx;
            layers.push(preds);
        }
        SetOutputs { layers }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        out.push(self.query_embed.clone());
        out.push(self.scale_embed.clone());
        for l in &self.layers {
            l.collect_params(out);
        }
    }
}

/// Per-scale dense predictions.
pub struct DenseScale {
    /// `[B, K, H, W]` class logits.
    pub cls: Var,
    /// `[B, 4·bins, H, W]` edge-distance distribution logits.
    pub reg: Var,
    pub stride: usize,
}

pub struct DenseOutputs {
    pub scales: Vec<DenseScale>,
}

struct DenseScaleHead {
    cls_tower: Conv2d,
    cls_norm: ModalNorm,
    cls_out: Conv2d,
    reg_tower: Conv2d,
    reg_norm: ModalNorm,
    reg_out: Conv2d,
    stride: usize,
}

pub struct DenseHead {
    scales: Vec<DenseScaleHead>,
    pub bins: usize,
}

impl DenseHead {
    pub fn new(
        channels: usize,
        strides: &[usize],
        num_classes: usize,
        bins: usize,
        rng: &mut ChaCha8Rng,
    ) -> DenseHead {
        let scales = strides
            .iter()
            .map(|&s| {
                let p = format!("head.s{s}");
                let cls_out =
                    Conv2d::new(&format!("{p}.cls_out"), channels, num_classes, 1, 1, 0, true, rng);
                cls_out.b.as_ref().unwrap().update(|a| a.fill(CLS_BIAS_INIT));
                DenseScaleHead {
                    cls_tower: Conv2d::new(&format!("{p}.cls_tower"), channels, channels, 3, 1, 1, false, rng),
                    cls_norm: ModalNorm::single(&format!("{p}.cls_tower.bn"), channels, 1.0),
                    cls_out,
                    reg_tower: Conv2d::new(&format!("{p}.reg_tower"), channels, channels, 3, 1, 1, false, rng),
                    reg_norm: ModalNorm::single(&format!("{p}.reg_tower.bn"), channels, 1.0),
                    reg_out: Conv2d::new(&format!("{p}.reg_out"), channels, 4 * bins, 1, 1, 0, true, rng),
                    stride: s,
                }
            })
            .collect();
        DenseHead { scales, bins }
    }

    pub fn forward(&self, tape: &Tape, feats: &[Var], train: bool, upd: bool) -> DenseOutputs {
        let scales = self
            .scales
            .iter()
            .zip(feats)
            .map(|(head, f)| {
                let c = head.cls_tower.forward(tape, f);
                let c = ops::silu(&head.cls_norm.forward(tape, &c, NormBranch::Full, train, upd));
                let cls = head.cls_out.forward(tape, &c);
                let r = head.reg_tower.forward(tape, f);
                let r = ops::silu(&head.reg_norm.forward(tape, &r, NormBranch::Full, train, upd));
                let reg = head.reg_out.forward(tape, &r);
                DenseScale {
                    cls,
                    reg,
                    stride: head.stride,
                }
            })
            .collect();
        DenseOutputs { scales }
    }

    pub fn collect_params(&self, out: &mut Vec<Rc<Param>>) {
        for s in &self.scales {
            s.cls_tower.collect_params(out);
            s.cls_norm.collect_params(out);
            s.cls_out.collect_params(out);
            s.reg_tower.collect_params(out);
            s.reg_norm.collect_params(out);
            s.reg_out.collect_params(out);
        }
    }

    pub fn collect_stats(&self, out: &mut Vec<Rc<RunningStats>>) {
        for s in &self.scales {
            s.cls_norm.collect_stats(out);
            s.reg_norm.collect_stats(out);
        }
    }
}

/// Expected edge distances from distribution logits: `[B, 4·bins, H, W]` →
/// `[B, H·W, 4]` distances in bin units (differentiable).
pub fn dfl_expectation(reg: &Var, bins: usize) -> Var {
    let (b, c, h, w) = (
        reg.shape()[0],
        reg.shape()[1],
        reg.shape()[2],
        reg.shape()[3],
    );
    assert_eq!(c, 4 * bins);
    let r = ops::reshape(reg, &[b, 4, bins, h * w]);
    let r = ops::permute(&r, &[0, 3, 1, 2]); // [B, H·W, 4, bins]
    let p = ops::softmax_lastdim(&r);
    let flat = ops::reshape(&p, &[b * h * w * 4, bins]);
    let iota = Arr::from_shape_vec(IxDyn(&[bins, 1]), (0..bins).map(|i| i as f64).collect())
        .unwrap();
    let e = ops::matmul(&flat, &Var::constant(iota));
    ops::reshape(&e, &[b, h * w, 4])
}

/// Decode `(l, t, r, b)` distances in bin units into pixel `xyxy` boxes
/// around the scale's grid centers: `[B, T, 4]` → `[B, T, 4]`.
pub fn decode_ltrb(dist: &Var, h: usize, w: usize, stride: usize) -> Var {
    let (b, t) = (dist.shape()[0], dist.shape()[1]);
    assert_eq!(t, h * w);
    let centers = posenc::grid_centers(h, w, stride);
    let mut cx = Arr::zeros(IxDyn(&[b, t, 1]));
    let mut cy = Arr::zeros(IxDyn(&[b, t, 1]));
    for bi in 0..b {
        for ti in 0..t {
            cx[[bi, ti, 0]] = centers[[ti, 0]];
            cy[[bi, ti, 0]] = centers[[ti, 1]];
        }
    }
    let (cx, cy) = (Var::constant(cx), Var::constant(cy));
    let s = stride as f64;
    let l = ops::scale(&ops::slice_axis(dist, 2, 0, 1), s);
    let tt = ops::scale(&ops::slice_axis(dist, 2, 1, 2), s);
    let r = ops::scale(&ops::slice_axis(dist, 2, 2, 3), s);
    let bb = ops::scale(&ops::slice_axis(dist, 2, 3, 4), s);
    let x1 = ops::sub(&cx, &l);
    let y1 = ops::sub(&cy, &tt);
    let x2 = ops::add(&cx, &r);
    let y2 = ops::add(&cy, &bb);
    ops::concat(2, &[&x1, &y1, &x2, &y2])
}

/// Intersection-over-union of two pixel `xyxy` boxes.
pub fn iou_xyxy(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy per-class non-maximum suppression; input need not be sorted.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && iou_xyxy(&k.bbox, &d.bbox) > iou_thr);
        if !suppressed {
            keep.push(d);
        }
    }
    keep
}
