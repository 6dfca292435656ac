//! Command-line front end: dataset generation, two-pass training,
//! evaluation under arbitrary depth configurations, depth sweeps,
//! representation analysis, and report plotting.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
//! Every command that produces files also writes a `manifest.json` capturing
//! what ran, a digest of its effective configuration, and the artifacts.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use flexdet::analysis::{
    cka_report, default_class_names, depth_sweep, mark_pareto_front, pr_breakdown, pr_table,
    sweep_csv, sweep_svg, CkaOptions, CollectOptions, SweepRow,
};
use flexdet::config::{enumerate_configs, ArchSpec, DepthConfiguration};
use flexdet::data::{generate_dataset, load_dataset, save_dataset, APReport, GenConfig, Scene};
use flexdet::losses::KDHyper;
use flexdet::model::{build_detector, Detector};
use flexdet::stages::ExecutionMode;
use flexdet::trainer::{evaluate, load_checkpoint, train, TrainOptions};
use flexdet::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "flexdet",
    version,
    about = "Train and analyze detectors whose depth is chosen at inference time"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-detection dataset.
    GenData(GenDataArgs),
    /// Train with the two-pass self-distillation scheme.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one depth configuration.
    Eval(EvalArgs),
    /// Evaluate every depth configuration and mark the Pareto front.
    Sweep(SweepArgs),
    /// Essential-vs-full representation alignment per stage.
    Cka(CkaArgs),
    /// Compare two evaluation reports class by class.
    Report(ReportArgs),
    /// Render a sweep CSV as an SVG scatter with its Pareto front.
    PlotPareto(PlotParetoArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum HeadArg {
    /// Set-prediction head with a query decoder.
    Detr,
    /// Anchor-free dense head with distribution box regression.
    Dense,
}

impl HeadArg {
    fn arch(self) -> ArchSpec {
        match self {
            HeadArg::Detr => ArchSpec::toy_detr(),
            HeadArg::Dense => ArchSpec::toy_dense(),
        }
    }

    fn hyper(self, arch: &ArchSpec) -> KDHyper {
        match self {
            HeadArg::Detr => KDHyper::set_prediction_defaults(arch),
            HeadArg::Dense => KDHyper::dense_defaults(arch),
        }
    }
}

#[derive(Parser, Serialize)]
struct GenDataArgs {
    /// Output directory (defaults to $FLEXDET_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    img_size: usize,
    /// 0 = clean, 1 = noise, 2 = noise and distractors.
    #[arg(long, default_value_t = 1)]
    clutter: u8,
    #[arg(long, default_value_t = 1)]
    min_objects: usize,
    #[arg(long, default_value_t = 8)]
    max_objects: usize,
}

#[derive(Parser, Serialize)]
struct TrainArgs {
    /// Training dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset directory; the training set is reused if omitted.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeadArg::Detr)]
    head: HeadArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Steps between validation passes (0 = final only).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Ground-truth weight in the second pass; 1.0 disables distillation.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Parser, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadArg::Detr)]
    head: HeadArg,
    /// Depth configuration: `full:all`, `essential:all`, or
    /// `essential:P2,P3` (listed stages essential, the rest full).
    #[arg(long, default_value = "full:all")]
    config: String,
    /// Decoder exit depth (defaults to the deepest).
    #[arg(long)]
    exit: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Parser, Serialize)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadArg::Detr)]
    head: HeadArg,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated decoder exits to sweep (defaults to all).
    #[arg(long)]
    exits: Option<String>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Parser, Serialize)]
struct CkaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadArg::Detr)]
    head: HeadArg,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long)]
    max_images: Option<usize>,
}

#[derive(Parser, Serialize)]
struct ReportArgs {
    /// Baseline evaluation report (JSON from `eval`).
    #[arg(long)]
    a: PathBuf,
    /// Comparison evaluation report.
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "a")]
    label_a: String,
    #[arg(long, default_value = "b")]
    label_b: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Parser, Serialize)]
struct PlotParetoArgs {
    /// Sweep CSV produced by `sweep`.
    #[arg(long)]
    sweep: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    let started = Instant::now();
    match cmd {
        Cmd::GenData(a) => cmd_gen_data(a, started),
        Cmd::Train(a) => cmd_train(a, started),
        Cmd::Eval(a) => cmd_eval(a, started),
        Cmd::Sweep(a) => cmd_sweep(a, started),
        Cmd::Cka(a) => cmd_cka(a, started),
        Cmd::Report(a) => cmd_report(a, started),
        Cmd::PlotPareto(a) => cmd_plot_pareto(a, started),
    }
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Resolve the output directory: the flag wins, then $FLEXDET_OUT.
fn resolve_out(flag: Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| std::env::var_os("FLEXDET_OUT").map(PathBuf::from))
        .ok_or_else(|| Error::Invalid("pass --out or set FLEXDET_OUT".into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::Io(format!("write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| Error::Io(format!("rename to {}: {e}", path.display())))
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    /// Digest of the parsed, effective configuration.
    config_sha256: String,
    seed: Option<u64>,
    artifacts: Vec<String>,
    wall_clock_secs: f64,
    git_revision: String,
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write_manifest(
    dir: &Path,
    command: &str,
    args: &impl Serialize,
    seed: Option<u64>,
    artifacts: &[PathBuf],
    started: Instant,
) -> Result<()> {
    let config_json = serde_json::to_string(args)?;
    let manifest = RunManifest {
        command: command.to_string(),
        argv: std::env::args().collect(),
        config_sha256: format!("{:x}", Sha256::digest(config_json.as_bytes())),
        seed,
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        git_revision: git_revision(),
    };
    write_atomic(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )
}

/// Parse the depth-configuration grammar: `MODE:all` or `MODE:ID,ID,...`
/// where MODE is `essential` or `full`; listed stages get MODE, the rest the
/// opposite.
fn parse_mode_config(arch: &ArchSpec, spec: &str, exit: Option<usize>) -> Result<DepthConfiguration> {
    let (mode_s, list_s) = spec
        .split_once(':')
        .ok_or_else(|| Error::Invalid(format!("config `{spec}` is not MODE:LIST")))?;
    let (mode, other) = match mode_s.trim() {
        "essential" => (ExecutionMode::Essential, ExecutionMode::Full),
        "full" => (ExecutionMode::Full, ExecutionMode::Essential),
        m => {
            return Err(Error::Invalid(format!(
                "mode `{m}` must be `essential` or `full`"
            )))
        }
    };
    let ids = arch.adaptable_stage_ids();
    let mut modes: BTreeMap<String, ExecutionMode> =
        ids.iter().map(|id| (id.clone(), other)).collect();
    if list_s.trim() == "all" {
        for v in modes.values_mut() {
            *v = mode;
        }
    } else {
        for tok in list_s.split(',') {
            let tok = tok.trim();
            if !ids.iter().any(|id| id == tok) {
                return Err(Error::Invalid(format!(
                    "unknown stage `{tok}` (choose from {})",
                    ids.join(", ")
                )));
            }
            modes.insert(tok.to_string(), mode);
        }
    }
    let cfg = DepthConfiguration {
        stage_modes: modes,
        decoder_exit: exit.unwrap_or_else(|| arch.max_exit()),
    };
    cfg.validate(arch)?;
    Ok(cfg)
}

fn load_scenes(dir: &Path, cap: Option<usize>) -> Result<Vec<Scene>> {
    let mut scenes = load_dataset(dir)?;
    if let Some(n) = cap {
        scenes.truncate(n);
    }
    if scenes.is_empty() {
        return Err(Error::Invalid(format!("{} holds no scenes", dir.display())));
    }
    Ok(scenes)
}

fn load_model(head: HeadArg, checkpoint: &Path) -> Result<(Detector, ArchSpec)> {
    let arch = head.arch();
    let det = build_detector(&arch, true, 0)?;
    load_checkpoint(checkpoint, &det)?;
    Ok((det, arch))
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_gen_data(a: GenDataArgs, started: Instant) -> Result<()> {
    let out = resolve_out(a.out.clone())?;
    let cfg = GenConfig {
        img_size: a.img_size,
        min_objects: a.min_objects,
        max_objects: a.max_objects,
        clutter: a.clutter,
    };
    let scenes = generate_dataset(a.seed, a.count, &cfg)?;
    save_dataset(&out, &scenes)?;
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    println!(
        "wrote {} scenes ({objects} objects) to {}",
        scenes.len(),
        out.display()
    );
    write_manifest(
        &out,
        "gen-data",
        &a,
        Some(a.seed),
        &[out.join("annotations.json"), out.join("images")],
        started,
    )
}

fn cmd_train(a: TrainArgs, started: Instant) -> Result<()> {
    let out = resolve_out(a.out.clone())?;
    let train_scenes = load_scenes(&a.data, None)?;
    let val_scenes = match &a.val_data {
        Some(dir) => load_scenes(dir, None)?,
        None => train_scenes.clone(),
    };
    let arch = a.head.arch();
    let mut hyper = a.head.hyper(&arch);
    if let Some(alpha) = a.alpha {
        hyper.alpha = alpha;
    }
    let opts = TrainOptions {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        eval_every: a.eval_every,
        eval_batch: 8,
        out_dir: Some(out.clone()),
    };
    let arts = train(&arch, hyper, &train_scenes, &val_scenes, &opts)?;
    println!(
        "trained {} steps: essential mAP {:.4}, full mAP {:.4} (best essential {:.4})",
        a.steps, arts.final_base.map, arts.final_super.map, arts.best_base_map
    );
    write_manifest(
        &out,
        "train",
        &a,
        Some(a.seed),
        &[
            out.join("metrics.csv"),
            out.join("last.ckpt"),
            out.join("last.ckpt.json"),
            out.join("best.ckpt"),
            out.join("best.ckpt.json"),
        ],
        started,
    )
}

fn cmd_eval(a: EvalArgs, started: Instant) -> Result<()> {
    let scenes = load_scenes(&a.data, a.max_images)?;
    let (det, arch) = load_model(a.head, &a.checkpoint)?;
    let cfg = parse_mode_config(&arch, &a.config, a.exit)?;
    let report = evaluate(&det, &scenes, &cfg, a.batch_size)?;
    println!(
        "{} exit {}: mAP {:.4}, AP50 {:.4}, AP75 {:.4}",
        cfg.bitstring(&arch),
        cfg.decoder_exit,
        report.map,
        report.ap50,
        report.ap75
    );
    if let Some(out) = a.out.clone().or_else(|| std::env::var_os("FLEXDET_OUT").map(PathBuf::from)) {
        std::fs::create_dir_all(&out)
            .map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
        let path = out.join("report.json");
        write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
        write_manifest(&out, "eval", &a, None, &[path], started)?;
    }
    Ok(())
}

fn parse_exits(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("bad exit `{t}`")))
        })
        .collect()
}

fn cmd_sweep(a: SweepArgs, started: Instant) -> Result<()> {
    let out = resolve_out(a.out.clone())?;
    let scenes = load_scenes(&a.data, a.max_images)?;
    let (det, arch) = load_model(a.head, &a.checkpoint)?;
    let exits = a.exits.as_deref().map(parse_exits).transpose()?;
    let configs = enumerate_configs(&arch, exits.as_deref())?;
    let rows = depth_sweep(&det, &scenes, &configs, a.batch_size)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    let path = out.join("sweep.csv");
    write_atomic(&path, sweep_csv(&rows).as_bytes())?;
    let front = rows.iter().filter(|r| r.on_front).count();
    println!(
        "swept {} configurations over {} scenes; {front} on the Pareto front",
        rows.len(),
        scenes.len()
    );
    write_manifest(&out, "sweep", &a, None, &[path], started)
}

fn cmd_cka(a: CkaArgs, started: Instant) -> Result<()> {
    let out = resolve_out(a.out.clone())?;
    let scenes = load_scenes(&a.data, a.max_images)?;
    let (det, _arch) = load_model(a.head, &a.checkpoint)?;
    let report = cka_report(
        &det,
        &scenes,
        &CkaOptions {
            collect: CollectOptions {
                batch_size: a.batch_size,
                ..CollectOptions::default()
            },
            bootstrap_n: a.bootstrap,
            seed: a.seed,
        },
    )?;
    for s in &report.stages {
        println!(
            "{:<8} cka {:.4} [{:.4}, {:.4}] (n = {})",
            s.stage_id, s.cka, s.ci_low, s.ci_high, s.n_samples
        );
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    let path = out.join("cka.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&report)?)?;
    write_manifest(&out, "cka", &a, Some(a.seed), &[path], started)
}

fn cmd_report(a: ReportArgs, started: Instant) -> Result<()> {
    let read = |p: &Path| -> Result<APReport> {
        let s = std::fs::read_to_string(p)
            .map_err(|e| Error::Io(format!("read {}: {e}", p.display())))?;
        Ok(serde_json::from_str(&s)?)
    };
    let (ra, rb) = (read(&a.a)?, read(&a.b)?);
    let bd = pr_breakdown(&ra, &rb, &default_class_names());
    let table = pr_table(&bd, &a.label_a, &a.label_b);
    print!("{table}");
    if let Some(out) = a.out.clone() {
        std::fs::create_dir_all(&out)
            .map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
        let path = out.join("comparison.txt");
        write_atomic(&path, table.as_bytes())?;
        write_manifest(&out, "report", &a, None, &[path], started)?;
    }
    Ok(())
}

fn cmd_plot_pareto(a: PlotParetoArgs, started: Instant) -> Result<()> {
    let out = resolve_out(a.out.clone())?;
    let csv = std::fs::read_to_string(&a.sweep)
        .map_err(|e| Error::Io(format!("read {}: {e}", a.sweep.display())))?;
    let mut rows = Vec::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Invalid(format!("sweep CSV line {} malformed", i + 1)));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad number `{s}` on line {}", i + 1)))
        };
        rows.push(SweepRow {
            bitstring: f[0].to_string(),
            exit: f[1]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad exit on line {}", i + 1)))?,
            flops: parse(f[2])?,
            map: parse(f[3])?,
            ap50: parse(f[4])?,
            on_front: false,
        });
    }
    if rows.is_empty() {
        return Err(Error::Invalid("sweep CSV holds no rows".into()));
    }
    mark_pareto_front(&mut rows);
    std::fs::create_dir_all(&out).map_err(|e| Error::Io(format!("create {}: {e}", out.display())))?;
    let path = out.join("pareto.svg");
    write_atomic(&path, sweep_svg(&rows).as_bytes())?;
    println!("plotted {} configurations to {}", rows.len(), path.display());
    write_manifest(&out, "plot-pareto", &a, None, &[path], started)
}
