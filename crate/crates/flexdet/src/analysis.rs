//! Representation and accuracy analysis: linear CKA between the essential
//! and full path at every adaptable stage, depth/accuracy sweeps with a
//! Pareto front, and per-class AP comparisons.

use crate::config::{enumerate_configs, flops_estimate, ArchSpec, DepthConfiguration};
use crate::data::{batch_images, APReport, Scene, CLASS_NAMES};
use crate::model::Detector;
use crate::nn::ops::adaptive_avg_pool_values;
use crate::nn::tape::{Tape, Var};
use crate::nn::Arr;
use crate::stages::BoundaryCapture;
use crate::trainer::evaluate;
use crate::{Error, Result};
use ndarray::{Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;

// ---------------------------------------------------------------------------
// Linear CKA
// ---------------------------------------------------------------------------

/// Linear centered kernel alignment between two row-aligned feature
/// matrices `[N, P]` and `[N, Q]`, computed in the cross-covariance form
///
/// ```text
/// CKA = ‖Xᶜᵀ Yᶜ‖²_F / (‖Xᶜᵀ Xᶜ‖_F · ‖Yᶜᵀ Yᶜ‖_F)
/// ```
///
/// which is exactly the Gram-matrix form with linear kernels but never
/// materializes an N×N matrix. Features with (numerically) zero variance
/// carry no alignment information and are rejected.
pub fn linear_cka(x: &Arr, y: &Arr) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(Error::Invalid(format!(
            "linear_cka wants [N, P] and [N, Q], got {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.shape()[0] < 2 {
        return Err(Error::Invalid("linear_cka needs at least 2 rows".into()));
    }
    let xc = center_columns(x);
    let yc = center_columns(y);
    let num = frob2(&xty(&xc, &yc));
    let den = frob2(&xty(&xc, &xc)).sqrt() * frob2(&xty(&yc, &yc)).sqrt();
    if den < 1e-24 {
        return Err(Error::Numeric(
            "linear_cka: a feature matrix has zero variance".into(),
        ));
    }
    Ok(num / den)
}

fn center_columns(x: &Arr) -> ndarray::Array2<f64> {
    let x = x
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("2-D input");
    let mean = x.mean_axis(Axis(0)).unwrap();
    &x - &mean.insert_axis(Axis(0))
}

/// `Xᵀ Y` for column-centered matrices.
fn xty(x: &ndarray::Array2<f64>, y: &ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    x.t().dot(y)
}

fn frob2(m: &ndarray::Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

// ---------------------------------------------------------------------------
// Boundary feature collection
// ---------------------------------------------------------------------------

/// Pooled boundary features of every adaptable stage, from forward passes
/// that run the full path and additionally compute the essential boundary
/// from the same intermediates.
pub struct BoundaryFeatures {
    /// stage id → (essential rows, full rows), both `[N, C]`.
    pub by_stage: BTreeMap<String, (Arr, Arr)>,
    pub n_samples: usize,
}

#[derive(Clone, Debug)]
pub struct CollectOptions {
    pub batch_size: usize,
    /// Row cap across the whole collection.
    pub max_samples: usize,
    pub max_batches: usize,
}

impl Default for CollectOptions {
    fn default() -> Self {
        CollectOptions {
            batch_size: 8,
            max_samples: 20_000,
            max_batches: 500,
        }
    }
}

/// Spatially pool `[B, C, H, W]` to a 4×4 grid and flatten to `[B·16, C]`
/// rows, so CKA compares channel profiles across images and coarse
/// locations.
fn pooled_rows(x: &Arr) -> Arr {
    let p = adaptive_avg_pool_values(x, 4, 4);
    let (b, c) = (p.shape()[0], p.shape()[1]);
    let mut out = Arr::zeros(IxDyn(&[b * 16, c]));
    for bi in 0..b {
        for gy in 0..4 {
            for gx in 0..4 {
                for ci in 0..c {
                    out[[bi * 16 + gy * 4 + gx, ci]] = p[[bi, ci, gy, gx]];
                }
            }
        }
    }
    out
}

pub fn collect_boundary_features(
    det: &Detector,
    scenes: &[Scene],
    opts: &CollectOptions,
) -> Result<BoundaryFeatures> {
    if scenes.is_empty() {
        return Err(Error::Invalid("no scenes to collect features from".into()));
    }
    let config = DepthConfiguration::super_net(&det.arch);
    let stage_ids = det.arch.adaptable_stage_ids();
    let mut parts: BTreeMap<String, (Vec<Arr>, Vec<Arr>)> = stage_ids
        .iter()
        .map(|id| (id.clone(), (Vec::new(), Vec::new())))
        .collect();
    let mut n = 0usize;
    for (bi, chunk) in scenes.chunks(opts.batch_size.max(1)).enumerate() {
        if bi >= opts.max_batches || n >= opts.max_samples {
            break;
        }
        let refs: Vec<&Scene> = chunk.iter().collect();
        let images = batch_images(&refs);
        let tape = Tape::new(false);
        let out = det.forward(
            &tape,
            &Var::constant(images),
            &config,
            BoundaryCapture::Both,
            false,
            false,
        )?;
        let mut batch_rows = 0;
        for id in &stage_ids {
            let b = out.boundaries.get(id).ok_or_else(|| {
                Error::Invalid(format!("stage {id} captured no boundary"))
            })?;
            let (ess, full) = match (&b.essential, &b.full) {
                (Some(e), Some(f)) => (pooled_rows(e.value()), pooled_rows(f.value())),
                _ => {
                    return Err(Error::Invalid(format!(
                        "stage {id} is missing a boundary side"
                    )))
                }
            };
            let take = ess.shape()[0].min(opts.max_samples - n);
            batch_rows = take;
            let slice = |a: &Arr| {
                a.slice_axis(Axis(0), ndarray::Slice::from(0..take))
                    .to_owned()
            };
            let entry = parts.get_mut(id).unwrap();
            entry.0.push(slice(&ess));
            entry.1.push(slice(&full));
        }
        n += batch_rows;
    }
    let mut by_stage = BTreeMap::new();
    for (id, (ess, full)) in parts {
        let cat = |v: &[Arr]| {
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        by_stage.insert(id, (cat(&ess), cat(&full)));
    }
    Ok(BoundaryFeatures {
        by_stage,
        n_samples: n,
    })
}

// ---------------------------------------------------------------------------
// CKA report with bootstrap intervals
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct StageCka {
    pub stage_id: String,
    pub cka: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CkaReport {
    pub stages: Vec<StageCka>,
}

impl CkaReport {
    pub fn get(&self, stage_id: &str) -> Option<&StageCka> {
        self.stages.iter().find(|s| s.stage_id == stage_id)
    }

    /// Mean CKA over stages whose id passes the filter.
    pub fn mean_where(&self, f: impl Fn(&str) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self
            .stages
            .iter()
            .filter(|s| f(&s.stage_id))
            .map(|s| s.cka)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Percentile bootstrap over rows: resample `(X, Y)` rows jointly, recompute
/// CKA, take the 2.5 % and 97.5 % quantiles. `bootstrap_n = 0` skips
/// resampling and pins the interval to the point estimate.
pub fn cka_with_ci(x: &Arr, y: &Arr, bootstrap_n: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let cka = linear_cka(x, y)?;
    if bootstrap_n == 0 {
        return Ok((cka, cka, cka));
    }
    let n = x.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reps = Vec::with_capacity(bootstrap_n);
    for _ in 0..bootstrap_n {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let xr = x.select(Axis(0), &idx);
        let yr = y.select(Axis(0), &idx);
        // A degenerate resample (zero variance) carries no signal; skip it.
        if let Ok(v) = linear_cka(&xr, &yr) {
            reps.push(v);
        }
    }
    if reps.is_empty() {
        return Ok((cka, cka, cka));
    }
    reps.sort_by(f64::total_cmp);
    let q = |p: f64| reps[((p * (reps.len() - 1) as f64).round() as usize).min(reps.len() - 1)];
    Ok((cka, q(0.025), q(0.975)))
}

#[derive(Clone, Debug)]
pub struct CkaOptions {
    pub collect: CollectOptions,
    pub bootstrap_n: usize,
    pub seed: u64,
}

impl Default for CkaOptions {
    fn default() -> Self {
        CkaOptions {
            collect: CollectOptions::default(),
            bootstrap_n: 500,
            seed: 0,
        }
    }
}

/// Essential-vs-full CKA per adaptable stage, with bootstrap confidence
/// intervals.
pub fn cka_report(det: &Detector, scenes: &[Scene], opts: &CkaOptions) -> Result<CkaReport> {
    let feats = collect_boundary_features(det, scenes, &opts.collect)?;
    let mut stages = Vec::new();
    for (id, (ess, full)) in &feats.by_stage {
        let (cka, lo, hi) = cka_with_ci(ess, full, opts.bootstrap_n, opts.seed)?;
        stages.push(StageCka {
            stage_id: id.clone(),
            cka,
            ci_low: lo,
            ci_high: hi,
            n_samples: feats.n_samples,
        });
    }
    Ok(CkaReport { stages })
}

// ---------------------------------------------------------------------------
// Depth sweep and Pareto front
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    /// `e`/`f` per adaptable stage, in canonical order.
    pub bitstring: String,
    pub exit: usize,
    /// Estimated multiply-accumulates for one forward pass.
    pub flops: f64,
    pub map: f64,
    pub ap50: f64,
    pub on_front: bool,
}

/// Evaluate the given depth configurations and mark the accuracy/compute
/// Pareto front. Rows come back sorted by FLOPs, then bitstring.
pub fn depth_sweep(
    det: &Detector,
    scenes: &[Scene],
    configs: &[DepthConfiguration],
    eval_batch: usize,
) -> Result<Vec<SweepRow>> {
    if scenes.is_empty() || configs.is_empty() {
        return Err(Error::Invalid("sweep needs scenes and configurations".into()));
    }
    let hw = scenes[0].hw();
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let report = evaluate(det, scenes, cfg, eval_batch)?;
        rows.push(SweepRow {
            bitstring: cfg.bitstring(&det.arch),
            exit: cfg.decoder_exit,
            flops: flops_estimate(&det.arch, cfg, hw)?,
            map: report.map,
            ap50: report.ap50,
            on_front: false,
        });
    }
    mark_pareto_front(&mut rows);
    Ok(rows)
}

/// Convenience: every configuration of the architecture.
pub fn all_configs(arch: &ArchSpec, exits: Option<&[usize]>) -> Result<Vec<DepthConfiguration>> {
    enumerate_configs(arch, exits)
}

/// Mark rows not dominated by any other (lower-or-equal FLOPs with
/// higher-or-equal mAP, strict somewhere), and sort by FLOPs.
pub fn mark_pareto_front(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        a.flops
            .total_cmp(&b.flops)
            .then(b.map.total_cmp(&a.map))
            .then(a.bitstring.cmp(&b.bitstring))
            .then(a.exit.cmp(&b.exit))
    });
    let mut best = f64::NEG_INFINITY;
    for r in rows.iter_mut() {
        r.on_front = r.map > best;
        if r.map > best {
            best = r.map;
        }
    }
}

pub const SWEEP_COLUMNS: &str = "bitstring,exit,flops,map,ap50,on_front";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_COLUMNS);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.bitstring, r.exit, r.flops, r.map, r.ap50, r.on_front
        );
    }
    s
}

/// Self-contained SVG scatter of the sweep: one dot per configuration,
/// the Pareto front joined by a line.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, ml, mb, mt, mr) = (640.0, 420.0, 70.0, 50.0, 20.0, 20.0);
    let (x0, x1) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.flops), hi.max(r.flops))
        });
    let xspan = (x1 - x0).max(1e-9);
    let sx = |f: f64| ml + (f - x0) / xspan * (w - ml - mr);
    let sy = |m: f64| h - mb - m.clamp(0.0, 1.0) * (h - mb - mt);
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(
        s,
        r#"<rect width="{w}" height="{h}" fill="white"/><line x1="{ml}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{y}" stroke="black"/>"#,
        y = h - mb,
        x = w - mr,
    );
    for i in 0..=5 {
        let m = i as f64 / 5.0;
        let _ = write!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="end">{m:.1}</text>"#,
            x = ml - 6.0,
            y = sy(m) + 4.0,
        );
    }
    for i in 0..=4 {
        let f = x0 + xspan * i as f64 / 4.0;
        let _ = write!(
            s,
            r#"<text x="{x}" y="{y}" text-anchor="middle">{v:.1}M</text>"#,
            x = sx(f),
            y = h - mb + 16.0,
            v = f / 1e6,
        );
    }
    let _ = write!(
        s,
        r#"<text x="{x}" y="{y}" text-anchor="middle">forward MACs</text><text x="14" y="{ymid}" transform="rotate(-90 14 {ymid})" text-anchor="middle">mAP</text>"#,
        x = (ml + w - mr) / 2.0,
        y = h - 12.0,
        ymid = (mt + h - mb) / 2.0,
    );
    let front: Vec<&SweepRow> = rows.iter().filter(|r| r.on_front).collect();
    if front.len() > 1 {
        let pts: Vec<String> = front
            .iter()
            .map(|r| format!("{:.2},{:.2}", sx(r.flops), sy(r.map)))
            .collect();
        let _ = write!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#c0392b" stroke-width="1.5"/>"##,
            pts.join(" ")
        );
    }
    for r in rows {
        let (fill, radius) = if r.on_front {
            ("#c0392b", 4.0)
        } else {
            ("#5b7fa6", 2.5)
        };
        let _ = write!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{fill}"><title>{} exit {} — mAP {:.3}</title></circle>"#,
            sx(r.flops),
            sy(r.map),
            r.bitstring,
            r.exit,
            r.map,
        );
    }
    s.push_str("</svg>");
    s
}

// ---------------------------------------------------------------------------
// Per-class AP comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PrRow {
    pub class_id: usize,
    pub name: String,
    pub ap_a: f64,
    pub ap_b: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PrBreakdown {
    pub rows: Vec<PrRow>,
    pub map_a: f64,
    pub map_b: f64,
}

/// Compare two evaluation reports class by class (delta = b − a). Classes
/// absent from both reports are skipped; absent from one count as AP 0.
pub fn pr_breakdown(a: &APReport, b: &APReport, class_names: &[&str]) -> PrBreakdown {
    let ids: std::collections::BTreeSet<usize> = a
        .per_class_ap
        .keys()
        .chain(b.per_class_ap.keys())
        .copied()
        .collect();
    let rows = ids
        .into_iter()
        .map(|c| {
            let ap_a = a.per_class_ap.get(&c).copied().unwrap_or(0.0);
            let ap_b = b.per_class_ap.get(&c).copied().unwrap_or(0.0);
            PrRow {
                class_id: c,
                name: class_names
                    .get(c)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class{c}")),
                ap_a,
                ap_b,
                delta: ap_b - ap_a,
            }
        })
        .collect();
    PrBreakdown {
        rows,
        map_a: a.map,
        map_b: b.map,
    }
}

/// Fixed-width text table of a breakdown.
pub fn pr_table(bd: &PrBreakdown, label_a: &str, label_b: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>8}", "class", label_a, label_b, "delta");
    for r in &bd.rows {
        let _ = writeln!(
            s,
            "{:<12} {:>10.4} {:>10.4} {:>+8.4}",
            r.name, r.ap_a, r.ap_b, r.delta
        );
    }
    let _ = writeln!(
        s,
        "{:<12} {:>10.4} {:>10.4} {:>+8.4}",
        "mAP",
        bd.map_a,
        bd.map_b,
        bd.map_b - bd.map_a
    );
    s
}

/// Default class names for the synthetic scenes.
pub fn default_class_names() -> Vec<&'static str> {
    CLASS_NAMES.to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{evaluate_map, generate_dataset, GenConfig};
    use crate::losses::Targets;
    use crate::model::build_detector;
    use crate::model::heads::Detection;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = Arr::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            *v = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
        a
    }

    /// Gram-matrix CKA: center the kernel with H = I − 11ᵀ/n and align.
    fn gram_cka(x: &Arr, y: &Arr) -> f64 {
        let n = x.shape()[0];
        let gram = |a: &Arr| {
            let a = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            a.dot(&a.t())
        };
        let center = |k: ndarray::Array2<f64>| {
            let ones = ndarray::Array2::<f64>::from_elem((n, n), 1.0 / n as f64);
            let h = ndarray::Array2::<f64>::eye(n) - &ones;
            h.dot(&k).dot(&h)
        };
        let (kc, lc) = (center(gram(x)), center(gram(y)));
        let dot = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| {
            a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>()
        };
        dot(&kc, &lc) / (dot(&kc, &kc).sqrt() * dot(&lc, &lc).sqrt())
    }

    #[test]
    fn cka_matches_the_gram_matrix_oracle() {
        let x = randn(&[40, 5], 1);
        let y = randn(&[40, 7], 2);
        let got = linear_cka(&x, &y).unwrap();
        let want = gram_cka(&x, &y);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn cka_identity_symmetry_and_invariances() {
        let x = randn(&[30, 6], 3);
        let y = randn(&[30, 6], 4);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (xy, yx) = (linear_cka(&x, &y).unwrap(), linear_cka(&y, &x).unwrap());
        assert!((xy - yx).abs() < 1e-12);

        // Isotropic scaling of either side changes nothing.
        let ys = y.mapv(|v| v * 3.7);
        assert!((linear_cka(&x, &ys).unwrap() - xy).abs() < 1e-12);

        // Orthogonal transform (a Householder reflection) changes nothing.
        let v = randn(&[6], 5);
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        let mut hh = ndarray::Array2::<f64>::eye(6);
        for i in 0..6 {
            for j in 0..6 {
                hh[[i, j]] -= 2.0 * v[[i]] * v[[j]] / norm2;
            }
        }
        let y2 = y.view().into_dimensionality::<ndarray::Ix2>().unwrap().dot(&hh);
        assert!((linear_cka(&x, &y2.into_dyn()).unwrap() - xy).abs() < 1e-9);
    }

    #[test]
    fn cka_rejects_zero_variance_inputs() {
        let x = Arr::from_elem(IxDyn(&[10, 3]), 2.5);
        let y = randn(&[10, 3], 6);
        match linear_cka(&x, &y) {
            Err(Error::Numeric(_)) => {}
            other => panic!("wanted a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn boundary_features_are_pooled_paired_and_capped() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 2).unwrap();
        let cfg = GenConfig {
            clutter: 0,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(12, 3, &cfg).unwrap();
        let feats = collect_boundary_features(
            &det,
            &scenes,
            &CollectOptions {
                batch_size: 2,
                ..CollectOptions::default()
            },
        )
        .unwrap();
        assert_eq!(feats.n_samples, 3 * 16);
        assert_eq!(
            feats.by_stage.keys().cloned().collect::<Vec<_>>(),
            {
                let mut ids = arch.adaptable_stage_ids();
                ids.sort();
                ids
            }
        );
        for (ess, full) in feats.by_stage.values() {
            assert_eq!(ess.shape(), full.shape());
            assert_eq!(ess.shape()[0], 48);
        }

        let capped = collect_boundary_features(
            &det,
            &scenes,
            &CollectOptions {
                batch_size: 2,
                max_samples: 20,
                max_batches: 500,
            },
        )
        .unwrap();
        assert_eq!(capped.n_samples, 20);
        for (ess, _) in capped.by_stage.values() {
            assert_eq!(ess.shape()[0], 20);
        }
    }

    #[test]
    fn cka_report_bootstrap_brackets_the_estimate() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 8).unwrap();
        let cfg = GenConfig {
            clutter: 0,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(13, 4, &cfg).unwrap();
        let report = cka_report(
            &det,
            &scenes,
            &CkaOptions {
                collect: CollectOptions {
                    batch_size: 2,
                    ..CollectOptions::default()
                },
                bootstrap_n: 30,
                seed: 7,
            },
        )
        .unwrap();
        assert_eq!(report.stages.len(), arch.adaptable_stage_ids().len());
        for s in &report.stages {
            assert!(s.cka >= 0.0 && s.cka <= 1.0 + 1e-12, "{}: {}", s.stage_id, s.cka);
            assert!(
                s.ci_low <= s.cka + 1e-9 && s.cka <= s.ci_high + 1e-9,
                "{}: [{}, {}] around {}",
                s.stage_id,
                s.ci_low,
                s.ci_high,
                s.cka
            );
            assert_eq!(s.n_samples, 64);
        }
        assert!(report.mean_where(|id| id.starts_with('P')).is_some());
    }

    #[test]
    fn pareto_front_marks_exactly_the_non_dominated_rows() {
        let mk = |bits: &str, flops: f64, map: f64| SweepRow {
            bitstring: bits.into(),
            exit: 1,
            flops,
            map,
            ap50: map,
            on_front: false,
        };
        let mut rows = vec![
            mk("a", 10.0, 0.2),
            mk("b", 20.0, 0.1), // dominated by a
            mk("c", 20.0, 0.5),
            mk("d", 30.0, 0.5), // dominated by c (same map, more flops)
            mk("e", 40.0, 0.9),
        ];
        mark_pareto_front(&mut rows);
        let front: Vec<&str> = rows
            .iter()
            .filter(|r| r.on_front)
            .map(|r| r.bitstring.as_str())
            .collect();
        assert_eq!(front, vec!["a", "c", "e"]);
        assert!(rows.windows(2).all(|w| w[0].flops <= w[1].flops));
    }

    #[test]
    fn sweep_outputs_are_deterministic_and_well_formed() {
        let arch = ArchSpec::toy_detr();
        let det = build_detector(&arch, true, 4).unwrap();
        let cfg = GenConfig {
            clutter: 0,
            ..GenConfig::default()
        };
        let scenes = generate_dataset(14, 2, &cfg).unwrap();
        let configs: Vec<DepthConfiguration> = vec![
            DepthConfiguration::base_net(&arch),
            DepthConfiguration::super_net(&arch),
        ];
        let rows = depth_sweep(&det, &scenes, &configs, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].flops < rows[1].flops);
        assert!(rows[0].on_front, "cheapest row is always on the front");
        let csv = sweep_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(SWEEP_COLUMNS));
        let svg = sweep_svg(&rows);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>"));
        assert_eq!(svg, sweep_svg(&depth_sweep(&det, &scenes, &configs, 2).unwrap()));
    }

    /// Sharp boxes for one class, 10 %-shifted boxes for the other: the
    /// breakdown attributes the gap to the mislocalized class.
    #[test]
    fn pr_breakdown_isolates_localization_errors() {
        let gts = vec![Targets {
            classes: vec![0, 1],
            boxes: vec![
                [10.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0],
                [40.0 / 64.0, 40.0 / 64.0, 10.0 / 64.0, 10.0 / 64.0],
            ],
        }];
        let px = gts[0].boxes_xyxy_px((64, 64));
        let exact = |i: usize, c: usize| Detection {
            class_id: c,
            score: 0.9,
            bbox: [px[[i, 0]], px[[i, 1]], px[[i, 2]], px[[i, 3]]],
        };
        let shifted = |i: usize, c: usize| Detection {
            class_id: c,
            score: 0.9,
            bbox: [px[[i, 0]] + 1.0, px[[i, 1]] + 1.0, px[[i, 2]] + 1.0, px[[i, 3]] + 1.0],
        };
        let a = evaluate_map(&[vec![exact(0, 0), shifted(1, 1)]], &gts, (64, 64), 2).unwrap();
        let b = evaluate_map(&[vec![exact(0, 0), exact(1, 1)]], &gts, (64, 64), 2).unwrap();
        let bd = pr_breakdown(&a, &b, &default_class_names());
        assert_eq!(bd.rows.len(), 2);
        assert!((bd.rows[0].delta).abs() < 1e-12, "circle class unchanged");
        assert!(bd.rows[1].delta > 0.2, "square class recovers: {:?}", bd.rows[1]);
        let table = pr_table(&bd, "shifted", "exact");
        assert!(table.contains("circle") && table.contains("square") && table.contains("mAP"));
    }
}
