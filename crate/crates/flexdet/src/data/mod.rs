//! Synthetic detection scenes and COCO-style evaluation.
//!
//! Scenes are procedurally rendered images of simple shapes — circles,
//! squares, triangles — on a gradient background, with exact bounding boxes
//! by construction. Determinism is seed-complete: the same seed yields the
//! same pixels. Evaluation follows the usual COCO protocol: 101-point
//! interpolated average precision over IoU thresholds 0.50:0.05:0.95, with
//! size-tier and recall breakdowns.

use crate::losses::Targets;
use crate::model::heads::{iou_xyxy, Detection};
use crate::nn::Arr;
use crate::{Error, Result};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const NUM_CLASSES: usize = 3;
pub const MAX_OBJECTS_PER_SCENE: usize = 8;

/// Bounding-box area (px²) tier edges: below the first is small, below the
/// second is medium, at or above is large.
pub const TIER_SMALL_MAX: f64 = 144.0;
pub const TIER_MEDIUM_MAX: f64 = 576.0;
/// Generation draws bbox areas from these per-tier ranges.
const TIER_AREA_RANGES: [(f64, f64); 3] = [
    (36.0, TIER_SMALL_MAX),
    (TIER_SMALL_MAX, TIER_MEDIUM_MAX),
    (TIER_MEDIUM_MAX, 1600.0),
];
/// Target tier mix (small, medium, large).
pub const TIER_MIX: [f64; 3] = [0.4, 0.4, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeTier {
    Small,
    Medium,
    Large,
}

pub fn size_tier(area_px: f64) -> SizeTier {
    if area_px < TIER_SMALL_MAX {
        SizeTier::Small
    } else if area_px < TIER_MEDIUM_MAX {
        SizeTier::Medium
    } else {
        SizeTier::Large
    }
}

/// One annotated object: class index and normalized `cxcywh` box.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub bbox: [f64; 4],
}

/// One image with its annotations. The image is `[3, H, W]` in [0, 1].
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Arr,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

/// Scene-generation knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    /// Square image side; must be a multiple of 32 and at least 64.
    pub img_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// 0 = clean background (boxes tightly bound what's rendered inside
    /// them); 1 adds pixel noise; 2 also adds unannotated low-contrast
    /// distractors.
    pub clutter: u8,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            img_size: 64,
            min_objects: 1,
            max_objects: MAX_OBJECTS_PER_SCENE,
            clutter: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_size < 64 || self.img_size % 32 != 0 {
            return Err(Error::Invalid(format!(
                "img_size {} must be a multiple of 32, at least 64",
                self.img_size
            )));
        }
        if self.min_objects < 1
            || self.min_objects > self.max_objects
            || self.max_objects > MAX_OBJECTS_PER_SCENE
        {
            return Err(Error::Invalid(format!(
                "object count range [{}, {}] outside [1, {MAX_OBJECTS_PER_SCENE}]",
                self.min_objects, self.max_objects
            )));
        }
        if self.clutter > 2 {
            return Err(Error::Invalid("clutter levels are 0, 1, 2".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Pixel-space geometry of one placed shape. `scale` is the bounding-box
/// width; the box is centered on `(cx, cy)`.
#[derive(Clone, Copy)]
struct Placed {
    class: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    color: [f64; 3],
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Bounding-box size (w, h) of a shape of the given class and scale.
fn shape_extent(class: usize, scale: f64) -> (f64, f64) {
    match class {
        2 => (scale, 1.5 * scale / SQRT3),
        _ => (scale, scale),
    }
}

/// Is the point inside the shape? Coordinates relative to the shape center.
fn inside(class: usize, scale: f64, dx: f64, dy: f64) -> bool {
    match class {
        0 => {
            let r = scale / 2.0;
            dx * dx + dy * dy <= r * r
        }
        1 => dx.abs() <= scale / 2.0 && dy.abs() <= scale / 2.0,
        2 => {
            // Equilateral triangle, apex up, shifted so its bbox is centered.
            let r = scale / SQRT3;
            let v = [
                (0.0, -0.75 * r),
                (-SQRT3 * r / 2.0, 0.75 * r),
                (SQRT3 * r / 2.0, 0.75 * r),
            ];
            let sign = |a: (f64, f64), b: (f64, f64)| -> f64 {
                (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0)
            };
            let (s0, s1, s2) = (sign(v[0], v[1]), sign(v[1], v[2]), sign(v[2], v[0]));
            (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
        }
        _ => unreachable!("class out of range"),
    }
}

/// Deterministic background shade at a pixel (gentle two-way gradient,
/// slightly different per channel).
fn background(img_size: usize, c: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x / img_size as f64, y / img_size as f64);
    match c {
        0 => 0.16 + 0.10 * fx + 0.04 * fy,
        1 => 0.18 + 0.06 * fx + 0.08 * fy,
        _ => 0.20 + 0.04 * fx + 0.10 * fy,
    }
}

/// Paint a shape with 4×4 supersampled coverage, blending over what's there.
fn paint(image: &mut Arr, p: &Placed) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (ew, eh) = shape_extent(p.class, p.scale);
    let x0 = ((p.cx - ew / 2.0).floor() as isize - 1).max(0) as usize;
    let x1 = (((p.cx + ew / 2.0).ceil() as isize) + 1).min(w as isize) as usize;
    let y0 = ((p.cy - eh / 2.0).floor() as isize - 1).max(0) as usize;
    let y1 = (((p.cy + eh / 2.0).ceil() as isize) + 1).min(h as isize) as usize;
    for py in y0..y1 {
        for px in x0..x1 {
            let mut hits = 0usize;
            for sy in 0..4 {
                for sx in 0..4 {
                    let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                    let y = py as f64 + (sy as f64 + 0.5) / 4.0;
                    if inside(p.class, p.scale, x - p.cx, y - p.cy) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f64 / 16.0;
            for c in 0..3 {
                let cur = image[[c, py, px]];
                image[[c, py, px]] = cur * (1.0 - cov) + p.color[c] * cov;
            }
        }
    }
}

fn render_scene(placed: &[Placed], distractors: &[Placed], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Arr {
    let n = cfg.img_size;
    let mut image = Arr::zeros(IxDyn(&[3, n, n]));
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                image[[c, y, x]] = background(n, c, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
    }
    for d in distractors {
        paint(&mut image, d);
    }
    for p in placed {
        paint(&mut image, p);
    }
    if cfg.clutter >= 1 {
        let sigma = 0.02 * cfg.clutter as f64;
        for v in image.iter_mut() {
            // Box–Muller standard normal from two uniforms.
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            *v = (*v + sigma * z).clamp(0.0, 1.0);
        }
    }
    image
}

/// Deficit-greedy tier chooser: keeps the realized mix within one object of
/// the target proportions.
fn next_tier(counts: &[usize; 3]) -> usize {
    let total: usize = counts.iter().sum();
    let mut best = 0;
    let mut best_deficit = f64::NEG_INFINITY;
    for k in 0..3 {
        let deficit = TIER_MIX[k] * (total + 1) as f64 - counts[k] as f64;
        if deficit > best_deficit {
            best_deficit = deficit;
            best = k;
        }
    }
    best
}

/// Generate a deterministic dataset: `count` scenes from one seed. Object
/// size tiers follow [`TIER_MIX`] across the whole dataset.
pub fn generate_dataset(seed: u64, count: usize, cfg: &GenConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tier_counts = [0usize; 3];
    let size = cfg.img_size as f64;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let want = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut placed: Vec<Placed> = Vec::new();
        let mut boxes_px: Vec<[f64; 4]> = Vec::new();
        for _ in 0..want {
            let tier = next_tier(&tier_counts);
            let (lo, hi) = TIER_AREA_RANGES[tier];
            let mut ok = false;
            for _attempt in 0..30 {
                let area = rng.random_range(lo..hi);
                let class = rng.random_range(0..NUM_CLASSES);
                // Solve the bbox-width scale from the target bbox area.
                let scale = match class {
                    2 => (area / (1.5 / SQRT3)).sqrt(),
                    _ => area.sqrt(),
                };
                let (ew, eh) = shape_extent(class, scale);
                if ew + 3.0 > size || eh + 3.0 > size {
                    continue;
                }
                let cx = rng.random_range(1.5 + ew / 2.0..size - 1.5 - ew / 2.0);
                let cy = rng.random_range(1.5 + eh / 2.0..size - 1.5 - eh / 2.0);
                let bb = [cx - ew / 2.0, cy - eh / 2.0, cx + ew / 2.0, cy + eh / 2.0];
                if boxes_px.iter().any(|b| iou_xyxy(b, &bb) > 0.3) {
                    continue;
                }
                let color = [
                    rng.random_range(0.45..1.0),
                    rng.random_range(0.45..1.0),
                    rng.random_range(0.45..1.0),
                ];
                placed.push(Placed {
                    class,
                    cx,
                    cy,
                    scale,
                    color,
                });
                boxes_px.push(bb);
                tier_counts[tier] += 1;
                ok = true;
                break;
            }
            if !ok {
                // Crowded scene; accept fewer objects rather than overlap.
                break;
            }
        }
        let mut distractors = Vec::new();
        if cfg.clutter >= 2 {
            for _ in 0..rng.random_range(3..7) {
                let scale = rng.random_range(2.0..5.0);
                let cx = rng.random_range(3.0..size - 3.0);
                let cy = rng.random_range(3.0..size - 3.0);
                let shade = rng.random_range(0.25..0.45);
                distractors.push(Placed {
                    class: rng.random_range(0..2),
                    cx,
                    cy,
                    scale,
                    color: [shade, shade, shade],
                });
            }
        }
        let image = render_scene(&placed, &distractors, cfg, &mut rng);
        let objects = placed
            .iter()
            .zip(&boxes_px)
            .map(|(p, b)| SceneObject {
                class: p.class,
                bbox: [
                    (b[0] + b[2]) / 2.0 / size,
                    (b[1] + b[3]) / 2.0 / size,
                    (b[2] - b[0]) / size,
                    (b[3] - b[1]) / size,
                ],
            })
            .collect();
        scenes.push(Scene { image, objects });
    }
    Ok(scenes)
}

/// Ground truth of a scene in the loss module's format.
pub fn scene_targets(scene: &Scene) -> Targets {
    Targets {
        classes: scene.objects.iter().map(|o| o.class).collect(),
        boxes: scene.objects.iter().map(|o| o.bbox).collect(),
    }
}

/// Stack scenes (all the same size) into a `[B, 3, H, W]` batch.
pub fn batch_images(scenes: &[&Scene]) -> Arr {
    assert!(!scenes.is_empty(), "batch_images: empty batch");
    let (h, w) = scenes[0].hw();
    let mut out = Arr::zeros(IxDyn(&[scenes.len(), 3, h, w]));
    for (b, s) in scenes.iter().enumerate() {
        assert_eq!(s.hw(), (h, w), "batch_images: mixed sizes");
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[b, c, y, x]] = s.image[[c, y, x]];
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Persistence (PNG images + COCO-style JSON)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: usize,
    category_id: usize,
    /// `[x, y, w, h]` in pixels.
    bbox: [f64; 4],
    area: f64,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDataset {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn io_err<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> Error + '_ {
    move |e| Error::Io(format!("{ctx}: {e}"))
}

/// Write scenes as `images/NNNNN.png` plus `annotations.json` under `dir`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(io_err("create images dir"))?;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let (h, w) = scene.hw();
        let file_name = format!("{i:05}.png");
        let mut buf = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    buf[(y * w + x) * 3 + c] =
                        (scene.image[[c, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
        let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized to the image");
        img.save(img_dir.join(&file_name))
            .map_err(io_err("write png"))?;
        images.push(CocoImage {
            id: i,
            file_name,
            width: w,
            height: h,
        });
        for o in &scene.objects {
            let bw = o.bbox[2] * w as f64;
            let bh = o.bbox[3] * h as f64;
            let x = o.bbox[0] * w as f64 - bw / 2.0;
            let y = o.bbox[1] * h as f64 - bh / 2.0;
            annotations.push(CocoAnnotation {
                id: annotations.len(),
                image_id: i,
                category_id: o.class + 1,
                bbox: [x, y, bw, bh],
                area: bw * bh,
            });
        }
    }
    let categories = CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory {
            id: i + 1,
            name: n.to_string(),
        })
        .collect();
    let ds = CocoDataset {
        images,
        annotations,
        categories,
    };
    let json = serde_json::to_string_pretty(&ds).map_err(io_err("serialize annotations"))?;
    std::fs::write(dir.join("annotations.json"), json).map_err(io_err("write annotations"))?;
    Ok(())
}

/// Load a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let json =
        std::fs::read_to_string(dir.join("annotations.json")).map_err(io_err("read annotations"))?;
    let ds: CocoDataset = serde_json::from_str(&json).map_err(io_err("parse annotations"))?;
    let mut scenes = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let path = dir.join("images").join(&im.file_name);
        let img = image::open(&path)
            .map_err(io_err("read png"))?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (im.width, im.height) {
            return Err(Error::Io(format!("{}: size mismatch", im.file_name)));
        }
        let (h, w) = (im.height, im.width);
        let mut arr = Arr::zeros(IxDyn(&[3, h, w]));
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    arr[[c, y, x]] = px[c] as f64 / 255.0;
                }
            }
        }
        let mut objects = Vec::new();
        for a in ds.annotations.iter().filter(|a| a.image_id == im.id) {
            if a.category_id == 0 || a.category_id > NUM_CLASSES {
                return Err(Error::Io(format!("annotation {}: bad category", a.id)));
            }
            objects.push(SceneObject {
                class: a.category_id - 1,
                bbox: [
                    (a.bbox[0] + a.bbox[2] / 2.0) / w as f64,
                    (a.bbox[1] + a.bbox[3] / 2.0) / h as f64,
                    a.bbox[2] / w as f64,
                    a.bbox[3] / h as f64,
                ],
            });
        }
        scenes.push(Scene {
            image: arr,
            objects,
        });
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

pub const AP_IOU_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// COCO-style metrics. Fields that had no ground truth to evaluate hold −1,
/// matching the usual convention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct APReport {
    /// AP averaged over IoU 0.50:0.05:0.95, all sizes, 100 detections.
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar1: f64,
    pub ar10: f64,
    pub ar100: f64,
    pub ar_small: f64,
    pub ar_medium: f64,
    pub ar_large: f64,
    /// Per-class AP at the primary setting.
    pub per_class_ap: BTreeMap<usize, f64>,
}

/// One class's matching workspace for one image: detections already in the
/// canonical order.
struct ImgEval {
    det_scores: Vec<f64>,
    det_areas: Vec<f64>,
    /// `ious[d][g]`
    ious: Vec<Vec<f64>>,
    gt_areas: Vec<f64>,
}

#[derive(Clone, Copy)]
struct AreaRange(f64, f64);

impl AreaRange {
    fn contains(&self, a: f64) -> bool {
        a >= self.0 && a < self.1
    }
}

const AREA_ALL: AreaRange = AreaRange(0.0, f64::INFINITY);
const AREA_SMALL: AreaRange = AreaRange(0.0, TIER_SMALL_MAX);
const AREA_MEDIUM: AreaRange = AreaRange(TIER_SMALL_MAX, TIER_MEDIUM_MAX);
const AREA_LARGE: AreaRange = AreaRange(TIER_MEDIUM_MAX, f64::INFINITY);

/// Sort detections into the canonical order: score descending, then box
/// coordinates — intrinsic to the detections, so input order never matters.
fn canonical_order(dets: &[&Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (dets[a], dets[b]);
        db.score
            .partial_cmp(&da.score)
            .unwrap()
            .then_with(|| da.bbox.partial_cmp(&db.bbox).unwrap())
    });
    idx
}

fn build_class_eval(preds: &[Vec<Detection>], gts: &[Targets], img_hw: (usize, usize), class: usize) -> Vec<ImgEval> {
    let mut out = Vec::with_capacity(preds.len());
    for (dets, gt) in preds.iter().zip(gts) {
        let class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
        let order = canonical_order(&class_dets);
        let gt_px = gt.boxes_xyxy_px(img_hw);
        let gt_idx: Vec<usize> = (0..gt.len()).filter(|&i| gt.classes[i] == class).collect();
        let gt_boxes: Vec<[f64; 4]> = gt_idx
            .iter()
            .map(|&i| [gt_px[[i, 0]], gt_px[[i, 1]], gt_px[[i, 2]], gt_px[[i, 3]]])
            .collect();
        let mut det_scores = Vec::with_capacity(order.len());
        let mut det_areas = Vec::with_capacity(order.len());
        let mut ious = Vec::with_capacity(order.len());
        for &d in &order {
            let det = class_dets[d];
            det_scores.push(det.score);
            det_areas.push(
                (det.bbox[2] - det.bbox[0]).max(0.0) * (det.bbox[3] - det.bbox[1]).max(0.0),
            );
            ious.push(gt_boxes.iter().map(|g| iou_xyxy(&det.bbox, g)).collect());
        }
        out.push(ImgEval {
            det_scores,
            det_areas,
            ious,
            gt_areas: gt_boxes
                .iter()
                .map(|b| (b[2] - b[0]) * (b[3] - b[1]))
                .collect(),
        });
    }
    out
}

/// Greedy COCO matching for one (class, threshold, area range, cap) combo.
/// Returns the pooled detection records `(score, image, rank, tp)` for
/// non-ignored detections, plus the non-ignored ground-truth count.
fn match_combo(
    imgs: &[ImgEval],
    thr: f64,
    range: AreaRange,
    maxdet: usize,
) -> (Vec<(f64, usize, usize, bool)>, usize) {
    let mut pooled = Vec::new();
    let mut npos = 0usize;
    for (img_i, img) in imgs.iter().enumerate() {
        let g_n = img.gt_areas.len();
        let gt_ignore: Vec<bool> = img.gt_areas.iter().map(|&a| !range.contains(a)).collect();
        npos += gt_ignore.iter().filter(|&&i| !i).count();
        let mut gt_used = vec![false; g_n];
        for d in 0..img.det_scores.len().min(maxdet) {
            // Best unmatched gt, preferring non-ignored ones.
            let mut best: Option<(usize, f64, bool)> = None;
            for g in 0..g_n {
                if gt_used[g] || img.ious[d][g] < thr {
                    continue;
                }
                let cand = (g, img.ious[d][g], gt_ignore[g]);
                best = match best {
                    None => Some(cand),
                    Some((_, bi, bign)) => {
                        // A non-ignored gt always beats an ignored one; among
                        // equals, higher IoU wins.
                        if (bign && !cand.2) || (bign == cand.2 && cand.1 > bi) {
                            Some(cand)
                        } else {
                            best
                        }
                    }
                };
            }
            match best {
                Some((g, _, ignored)) => {
                    gt_used[g] = true;
                    if !ignored {
                        pooled.push((img.det_scores[d], img_i, d, true));
                    }
                }
                None => {
                    // Unmatched; only counts against precision if its size is
                    // in range.
                    if range.contains(img.det_areas[d]) {
                        pooled.push((img.det_scores[d], img_i, d, false));
                    }
                }
            }
        }
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    (pooled, npos)
}

/// 101-point interpolated AP from pooled records; `None` when the combo has
/// no ground truth.
fn ap_from(pooled: &[(f64, usize, usize, bool)], npos: usize) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut pr: Vec<(f64, f64)> = Vec::with_capacity(pooled.len());
    for rec in pooled {
        if rec.3 {
            tp += 1;
        } else {
            fp += 1;
        }
        pr.push((tp as f64 / npos as f64, tp as f64 / (tp + fp) as f64));
    }
    // Precision envelope from the right, sampled at recalls 0.00..=1.00.
    let mut ap = 0.0;
    for i in 0..=100 {
        let r = i as f64 / 100.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    Some(ap / 101.0)
}

fn recall_from(pooled: &[(f64, usize, usize, bool)], npos: usize) -> Option<f64> {
    if npos == 0 {
        return None;
    }
    let tp = pooled.iter().filter(|r| r.3).count();
    Some(tp as f64 / npos as f64)
}

fn mean_or_neg1(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        -1.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// COCO-style evaluation of per-image detections against ground truth.
/// `preds[i]` are the detections of image `i` (pixel `xyxy` boxes);
/// detection order within an image never affects the result.
pub fn evaluate_map(
    preds: &[Vec<Detection>],
    gts: &[Targets],
    img_hw: (usize, usize),
    num_classes: usize,
) -> Result<APReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "{} prediction lists vs {} ground-truth sets",
            preds.len(),
            gts.len()
        )));
    }
    let per_class: Vec<Vec<ImgEval>> = (0..num_classes)
        .map(|c| build_class_eval(preds, gts, img_hw, c))
        .collect();

    let mut all_aps = Vec::new();
    let mut ap50s = Vec::new();
    let mut ap75s = Vec::new();
    let mut tier_aps = [Vec::new(), Vec::new(), Vec::new()];
    let mut recalls = [Vec::new(), Vec::new(), Vec::new()]; // caps 1/10/100
    let mut tier_recalls = [Vec::new(), Vec::new(), Vec::new()];
    let mut per_class_ap = BTreeMap::new();

    for (c, imgs) in per_class.iter().enumerate() {
        let mut class_aps = Vec::new();
        for &thr in &AP_IOU_THRESHOLDS {
            let (pooled, npos) = match_combo(imgs, thr, AREA_ALL, 100);
            if let Some(ap) = ap_from(&pooled, npos) {
                all_aps.push(ap);
                class_aps.push(ap);
                if thr == 0.50 {
                    ap50s.push(ap);
                }
                if thr == 0.75 {
                    ap75s.push(ap);
                }
            }
            if let Some(r) = recall_from(&pooled, npos) {
                recalls[2].push(r);
            }
            for (cap_i, cap) in [(0usize, 1usize), (1, 10)] {
                let (pooled, npos) = match_combo(imgs, thr, AREA_ALL, cap);
                if let Some(r) = recall_from(&pooled, npos) {
                    recalls[cap_i].push(r);
                }
            }
            for (t, range) in [AREA_SMALL, AREA_MEDIUM, AREA_LARGE].iter().enumerate() {
                let (pooled, npos) = match_combo(imgs, thr, *range, 100);
                if let Some(ap) = ap_from(&pooled, npos) {
                    tier_aps[t].push(ap);
                }
                if let Some(r) = recall_from(&pooled, npos) {
                    tier_recalls[t].push(r);
                }
            }
        }
        if !class_aps.is_empty() {
            per_class_ap.insert(c, mean_or_neg1(&class_aps));
        }
    }

    Ok(APReport {
        map: mean_or_neg1(&all_aps),
        ap50: mean_or_neg1(&ap50s),
        ap75: mean_or_neg1(&ap75s),
        ap_small: mean_or_neg1(&tier_aps[0]),
        ap_medium: mean_or_neg1(&tier_aps[1]),
        ap_large: mean_or_neg1(&tier_aps[2]),
        ar1: mean_or_neg1(&recalls[0]),
        ar10: mean_or_neg1(&recalls[1]),
        ar100: mean_or_neg1(&recalls[2]),
        ar_small: mean_or_neg1(&tier_recalls[0]),
        ar_medium: mean_or_neg1(&tier_recalls[1]),
        ar_large: mean_or_neg1(&tier_recalls[2]),
        per_class_ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(class_id: usize, score: f64, bbox: [f64; 4]) -> Detection {
        Detection {
            class_id,
            score,
            bbox,
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = GenConfig::default();
        let a = generate_dataset(7, 6, &cfg).unwrap();
        let b = generate_dataset(7, 6, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.objects, y.objects);
            assert_eq!(x.image, y.image);
        }
        let c = generate_dataset(8, 6, &cfg).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn tier_mix_stays_within_tolerance() {
        let cfg = GenConfig::default();
        let scenes = generate_dataset(11, 150, &cfg).unwrap();
        let mut counts = [0usize; 3];
        let size = cfg.img_size as f64;
        for s in &scenes {
            for o in &s.objects {
                let area = o.bbox[2] * size * o.bbox[3] * size;
                match size_tier(area) {
                    SizeTier::Small => counts[0] += 1,
                    SizeTier::Medium => counts[1] += 1,
                    SizeTier::Large => counts[2] += 1,
                }
            }
        }
        let total: usize = counts.iter().sum();
        assert!(total >= 150);
        for (k, &target) in TIER_MIX.iter().enumerate() {
            let frac = counts[k] as f64 / total as f64;
            assert!(
                (frac - target).abs() <= 0.05,
                "tier {k}: {frac:.3} vs {target}"
            );
        }
    }

    #[test]
    fn clutter_zero_boxes_are_tight() {
        let cfg = GenConfig {
            clutter: 0,
            min_objects: 1,
            max_objects: 1,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(3, 4, &cfg).unwrap();
        let n = cfg.img_size;
        for s in &scenes {
            let o = &s.objects[0];
            let (x1, y1) = (
                (o.bbox[0] - o.bbox[2] / 2.0) * n as f64,
                (o.bbox[1] - o.bbox[3] / 2.0) * n as f64,
            );
            let (x2, y2) = (x1 + o.bbox[2] * n as f64, y1 + o.bbox[3] * n as f64);
            // Every pixel that differs from the clean background lies inside
            // the (1-px padded) box, and the shape actually reaches both box
            // edges within the anti-aliasing fringe.
            let mut painted = Vec::new();
            for y in 0..n {
                for x in 0..n {
                    let is_bg = (0..3).all(|c| {
                        (s.image[[c, y, x]] - background(n, c, x as f64 + 0.5, y as f64 + 0.5))
                            .abs()
                            < 1e-9
                    });
                    if !is_bg {
                        painted.push((x as f64 + 0.5, y as f64 + 0.5));
                    }
                }
            }
            assert!(!painted.is_empty());
            for &(px, py) in &painted {
                assert!(
                    px > x1 - 1.5 && px < x2 + 1.5 && py > y1 - 1.5 && py < y2 + 1.5,
                    "paint at ({px}, {py}) outside box [{x1}, {y1}, {x2}, {y2}]"
                );
            }
            let min_x = painted.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max_x = painted.iter().map(|p| p.0).fold(0.0, f64::max);
            assert!(min_x < x1 + 1.5 && max_x > x2 - 1.5, "box is not tight in x");
        }
    }

    #[test]
    fn dataset_roundtrips_through_png_and_json() {
        let cfg = GenConfig::default();
        let scenes = generate_dataset(21, 3, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &scenes).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), scenes.len());
        for (a, b) in scenes.iter().zip(&back) {
            assert_eq!(a.objects.len(), b.objects.len());
            for (oa, ob) in a.objects.iter().zip(&b.objects) {
                assert_eq!(oa.class, ob.class);
                for j in 0..4 {
                    assert!((oa.bbox[j] - ob.bbox[j]).abs() < 1e-9);
                }
            }
            // 8-bit quantization allows at most half a level of error.
            let worst = a
                .image
                .iter()
                .zip(b.image.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-9, "worst pixel err {worst}");
        }
    }

    /// Two ground truths, three detections ranked TP(IoU 1.0), FP(IoU 0),
    /// TP(IoU ≈ 0.68). Hand-computed 101-point APs: precision is 1 up to
    /// recall 0.5 and 2/3 beyond it at IoU 0.50, and full recall is never
    /// reached at IoU 0.75.
    #[test]
    fn ap_matches_a_hand_computed_fixture() {
        let gts = vec![Targets {
            classes: vec![0, 0],
            boxes: vec![
                [5.0 / 64.0, 5.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0],
                [25.0 / 64.0, 25.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0],
            ],
        }];
        let preds = vec![vec![
            det(0, 0.9, [0.0, 0.0, 10.0, 10.0]),
            det(0, 0.8, [40.0, 40.0, 50.0, 50.0]),
            det(0, 0.7, [21.0, 21.0, 31.0, 31.0]),
        ]];
        let rep = evaluate_map(&preds, &gts, (64, 64), 1).unwrap();
        let want_ap50 = (51.0 + 50.0 * (2.0 / 3.0)) / 101.0;
        let want_ap75 = 51.0 / 101.0;
        assert!((rep.ap50 - want_ap50).abs() < 1e-12, "{} vs {want_ap50}", rep.ap50);
        assert!((rep.ap75 - want_ap75).abs() < 1e-12, "{} vs {want_ap75}", rep.ap75);
        // IoU of the second detection is 81/119 ≈ 0.6807: thresholds 0.50–0.65
        // see two TPs, 0.70–0.95 see one.
        let want_map = (4.0 * want_ap50 + 6.0 * want_ap75) / 10.0;
        assert!((rep.map - want_map).abs() < 1e-12);
        assert_eq!(rep.per_class_ap.len(), 1);
    }

    #[test]
    fn perfect_predictions_score_one_and_jitter_hurts_ap75() {
        let cfg = GenConfig {
            clutter: 0,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(33, 8, &cfg).unwrap();
        let gts: Vec<Targets> = scenes.iter().map(scene_targets).collect();
        let hw = scenes[0].hw();
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|t| {
                t.classes
                    .iter()
                    .zip(&t.boxes)
                    .enumerate()
                    .map(|(i, (&c, b))| {
                        let px = Targets {
                            classes: vec![c],
                            boxes: vec![*b],
                        }
                        .boxes_xyxy_px(hw);
                        det(c, 0.95 - 0.01 * i as f64, [px[[0, 0]], px[[0, 1]], px[[0, 2]], px[[0, 3]]])
                    })
                    .collect()
            })
            .collect();
        let rep = evaluate_map(&perfect, &gts, hw, NUM_CLASSES).unwrap();
        assert!((rep.map - 1.0).abs() < 1e-12, "perfect mAP {}", rep.map);
        assert!((rep.ar100 - 1.0).abs() < 1e-12);

        // Shift every box by 10% of its own size in both axes: IoU drops to
        // 0.81/1.19 ≈ 0.68, losing the 0.75 threshold but keeping 0.50.
        let jittered: Vec<Vec<Detection>> = perfect
            .iter()
            .map(|dets| {
                dets.iter()
                    .map(|d| {
                        let w = d.bbox[2] - d.bbox[0];
                        let h = d.bbox[3] - d.bbox[1];
                        det(
                            d.class_id,
                            d.score,
                            [
                                d.bbox[0] + 0.1 * w,
                                d.bbox[1] + 0.1 * h,
                                d.bbox[2] + 0.1 * w,
                                d.bbox[3] + 0.1 * h,
                            ],
                        )
                    })
                    .collect()
            })
            .collect();
        let jrep = evaluate_map(&jittered, &gts, hw, NUM_CLASSES).unwrap();
        assert!((jrep.ap50 - 1.0).abs() < 1e-12, "jitter keeps AP50");
        assert!(jrep.ap75 < 0.01, "jitter kills AP75, got {}", jrep.ap75);
        assert!(jrep.map < rep.map);
    }

    #[test]
    fn detection_order_never_changes_the_report() {
        let cfg = GenConfig::default();
        let scenes = generate_dataset(44, 5, &cfg).unwrap();
        let gts: Vec<Targets> = scenes.iter().map(scene_targets).collect();
        let hw = scenes[0].hw();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        // Noisy predictions with deliberate score ties.
        let preds: Vec<Vec<Detection>> = gts
            .iter()
            .map(|t| {
                let px = t.boxes_xyxy_px(hw);
                let mut dets = Vec::new();
                for i in 0..t.len() {
                    let jx = rng.random_range(-3.0..3.0);
                    let jy = rng.random_range(-3.0..3.0);
                    dets.push(det(
                        t.classes[i],
                        0.5,
                        [px[[i, 0]] + jx, px[[i, 1]] + jy, px[[i, 2]] + jx, px[[i, 3]] + jy],
                    ));
                    dets.push(det(rng.random_range(0..NUM_CLASSES), 0.5, [
                        rng.random_range(0.0..32.0),
                        rng.random_range(0.0..32.0),
                        rng.random_range(32.0..64.0),
                        rng.random_range(32.0..64.0),
                    ]));
                }
                dets
            })
            .collect();
        let reversed: Vec<Vec<Detection>> = preds
            .iter()
            .map(|d| d.iter().rev().cloned().collect())
            .collect();
        let a = evaluate_map(&preds, &gts, hw, NUM_CLASSES).unwrap();
        let b = evaluate_map(&reversed, &gts, hw, NUM_CLASSES).unwrap();
        assert_eq!(a.map.to_bits(), b.map.to_bits());
        assert_eq!(a.ap50.to_bits(), b.ap50.to_bits());
        assert_eq!(a.ar100.to_bits(), b.ar100.to_bits());
        assert_eq!(a.per_class_ap, b.per_class_ap);
    }

    #[test]
    fn recall_caps_limit_how_many_detections_count() {
        let gts = vec![Targets {
            classes: vec![0, 0, 0],
            boxes: vec![
                [10.0 / 64.0, 10.0 / 64.0, 8.0 / 64.0, 8.0 / 64.0],
                [30.0 / 64.0, 30.0 / 64.0, 8.0 / 64.0, 8.0 / 64.0],
                [50.0 / 64.0, 50.0 / 64.0, 8.0 / 64.0, 8.0 / 64.0],
            ],
        }];
        let px = gts[0].boxes_xyxy_px((64, 64));
        let preds = vec![(0..3)
            .map(|i| {
                det(
                    0,
                    0.9 - 0.1 * i as f64,
                    [px[[i, 0]], px[[i, 1]], px[[i, 2]], px[[i, 3]]],
                )
            })
            .collect::<Vec<_>>()];
        let rep = evaluate_map(&preds, &gts, (64, 64), 1).unwrap();
        assert!((rep.ar1 - 1.0 / 3.0).abs() < 1e-12, "ar1 {}", rep.ar1);
        assert!((rep.ar10 - 1.0).abs() < 1e-12);
        assert!((rep.ar100 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn size_tier_report_splits_by_ground_truth_area() {
        // One small (8×8 = 64 px²) and one large (30×30 = 900 px²) object;
        // only the small one is detected.
        let gts = vec![Targets {
            classes: vec![0, 0],
            boxes: vec![
                [10.0 / 64.0, 10.0 / 64.0, 8.0 / 64.0, 8.0 / 64.0],
                [40.0 / 64.0, 40.0 / 64.0, 30.0 / 64.0, 30.0 / 64.0],
            ],
        }];
        let px = gts[0].boxes_xyxy_px((64, 64));
        let preds = vec![vec![det(0, 0.9, [px[[0, 0]], px[[0, 1]], px[[0, 2]], px[[0, 3]]])]];
        let rep = evaluate_map(&preds, &gts, (64, 64), 1).unwrap();
        assert!((rep.ap_small - 1.0).abs() < 1e-12, "ap_small {}", rep.ap_small);
        assert_eq!(rep.ap_medium, -1.0, "no medium ground truth");
        assert!(rep.ap_large.abs() < 1e-12, "large object missed");
        assert!((rep.ar_small - 1.0).abs() < 1e-12);
        assert!(rep.ar_large.abs() < 1e-12);
    }
}
