//! `xnet`: fusion distillation, pretraining, tracking and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod dataset;
mod manifest;
mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use xnet_core::config::Precision;
use xnet_core::data::{fusion_pairs, read_results, save_sequence, synth_sequence, write_results};
use xnet_core::fim::channel_mean;
use xnet_core::frame::{heatmap_image, rgb_to_image};
use xnet_core::model::load_student;
use xnet_core::pgm::{distill_train, AnalyticTeacher, DistillConfig};
use xnet_core::pipeline::{build_net, distill_default, pretrain, synthetic_corpus, track_sequence, TrackOptions};
use xnet_core::tensor::{encode_checkpoint, load_checkpoint};
use xnet_core::{FeatureNet, MetricsReport, PgmStudent, Real, RunConfig, SynthSpec, Variant};

use dataset::DatasetSource;
use manifest::{hash_tree, HashedFile, RunManifest, TrackSettings, MANIFEST_FILE};

/// Bad arguments or inputs; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "xnet", version, about = "RGB-thermal single-object tracker")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Distil the pixel-level fusion student and write its checkpoint.
    PgmTrain(PgmTrainArgs),
    /// Offline multi-domain training of backbones and interaction module.
    Pretrain(PretrainArgs),
    /// Track one sequence and write results, metrics and a run manifest.
    Track(TrackArgs),
    /// Score an existing results file against ground truth.
    Eval(EvalArgs),
    /// Write a synthetic sequence in the on-disk dataset layout.
    SynthGen(SynthGenArgs),
    /// Write per-frame attention heat maps without tracking.
    DumpHeatmaps(DumpHeatmapsArgs),
}

#[derive(Args, Debug, Clone)]
struct RunOpts {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset (v1, v2, v3, full); overrides the module switches.
    #[arg(long)]
    variant: Option<String>,
    /// Overrides the configured seed and `XNET_SEED`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured precision (f32 or f64).
    #[arg(long)]
    precision: Option<String>,
}

impl RunOpts {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                if !p.is_file() {
                    return Err(UsageError(format!("config {} does not exist", p.display())).into());
                }
                RunConfig::load(p).map_err(|e| UsageError(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = &self.variant {
            let v: Variant = v.parse().map_err(|e: xnet_core::config::ConfigError| UsageError(e.to_string()))?;
            cfg = cfg.with_variant(v);
        }
        if let Some(s) = self.seed.map(Ok).or_else(env_seed).transpose()? {
            cfg.seed = s;
        }
        if let Some(p) = &self.precision {
            cfg.precision = match p.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(UsageError(format!("unknown precision {other}")).into()),
            };
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct PgmTrainArgs {
    /// `synth` for the built-in pair corpus, or a sequence directory.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output checkpoint; the loss trace goes next to it as `<out>.trace.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// `synth` for the built-in corpus, or one or more sequence directories.
    #[arg(long, num_args = 1.., default_value = "synth")]
    data: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Fusion student checkpoint; distilled on the fly when absent.
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct TrackArgs {
    /// Sequence directory, `synth`, or `synth:<spec.json>`.
    #[arg(long, required_unless_present = "manifest")]
    dataset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained feature network checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fusion student checkpoint.
    #[arg(long)]
    pgm: Option<PathBuf>,
    /// Use the 5-pixel precision threshold.
    #[arg(long)]
    gtot: bool,
    /// Precision threshold in pixels.
    #[arg(long, default_value_t = 20.0)]
    threshold: f64,
    #[arg(long)]
    dump_heatmaps: bool,
    #[arg(long)]
    dump_flow: bool,
    /// Write frames with predicted (red) and ground-truth (green) boxes.
    #[arg(long)]
    render: bool,
    /// Repeat the run recorded in this manifest and compare outputs.
    #[arg(long, conflicts_with_all = ["dataset", "checkpoint", "pgm", "config", "variant", "seed", "precision"])]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    run: RunOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    gtot: bool,
    #[arg(long, default_value_t = 20.0)]
    threshold: f64,
    /// Output directory for metrics.json, pr.csv and sr.csv; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthGenArgs {
    /// Spec JSON; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec seed and `XNET_SEED`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DumpHeatmapsArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    run: RunOpts,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

macro_rules! by_precision {
    ($p:expr, $f:ident ( $($a:expr),* )) => {
        match $p {
            Precision::F32 => $f::<f32>($($a),*),
            Precision::F64 => $f::<f64>($($a),*),
        }
    };
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::PgmTrain(a) => {
            let cfg = a.run.resolve()?;
            by_precision!(cfg.precision, pgm_train(&a, cfg.clone()))
        }
        Command::Pretrain(a) => {
            let cfg = a.run.resolve()?;
            by_precision!(cfg.precision, pretrain_cmd(&a, cfg.clone()))
        }
        Command::Track(a) => track_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::SynthGen(a) => synth_gen(&a),
        Command::DumpHeatmaps(a) => {
            let cfg = a.run.resolve()?;
            by_precision!(cfg.precision, dump_heatmaps(&a, cfg.clone()))
        }
    }
}

fn env_seed() -> Option<Result<u64, UsageError>> {
    let v = std::env::var("XNET_SEED").ok()?;
    Some(v.trim().parse().map_err(|_| UsageError(format!("XNET_SEED={v} is not an unsigned integer"))))
}

fn require_file(p: &Path, what: &str) -> Result<(), UsageError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("{what} {} does not exist", p.display())))
    }
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn pgm_train<R: Real>(a: &PgmTrainArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(e) = a.epochs {
        cfg.pgm_epochs = e;
    }
    let pairs = if a.data == "synth" {
        fusion_pairs::<R>(cfg.pgm_train_pairs, cfg.pgm_train_size, cfg.seed)
    } else {
        let src = DatasetSource::parse(&a.data)?;
        src.load::<R>()?.frames
    };
    let dc = DistillConfig::from_run(&cfg);
    let out = distill_train(&pairs, &AnalyticTeacher, PgmStudent::new(cfg.pgm_channels, cfg.seed), &dc)?;
    let meta = serde_json::json!({
        "kind": "fusion-student",
        "channels": cfg.pgm_channels,
        "epochs": cfg.pgm_epochs,
        "seed": cfg.seed,
        "data": a.data,
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, encode_checkpoint(&out.student.params.entries("pgm"), meta)?)
        .with_context(|| format!("writing {}", a.out.display()))?;
    let mut trace = String::from("epoch,clean_l1,train_loss\n");
    for (i, (l1, tl)) in out.trace.iter().zip(&out.train_trace).enumerate() {
        trace.push_str(&format!("{i},{l1:.8},{tl:.8}\n"));
    }
    let trace_path = with_suffix(&a.out, ".trace.csv");
    fs::write(&trace_path, trace)?;
    log::info!(
        "fusion student: final clean L1 {:.4}; wrote {} and {}",
        out.trace.last().copied().unwrap_or(f64::NAN),
        a.out.display(),
        trace_path.display()
    );
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Network for `cfg`, with the fusion student taken from `pgm`, then from
/// the checkpoint, and distilled afresh only when neither holds one.
fn assemble_net<R: Real>(cfg: &RunConfig, checkpoint: Option<&Path>, pgm: Option<&Path>) -> anyhow::Result<FeatureNet<R>> {
    let ck = checkpoint
        .map(|p| load_checkpoint(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let student = match (cfg.pgm, pgm) {
        (false, _) => None,
        (true, Some(p)) => Some(load_student::<R>(p, cfg.pgm_channels)?),
        (true, None) if ck.as_ref().is_some_and(|c| c.names().any(|n| n.starts_with("pgm."))) => {
            Some(PgmStudent::new(cfg.pgm_channels, cfg.seed))
        }
        (true, None) => {
            log::info!("no fusion student given; distilling one ({} epochs)", cfg.pgm_epochs);
            Some(distill_default::<R>(cfg)?)
        }
    };
    let mut net = build_net(cfg, student)?;
    if let Some(ck) = &ck {
        net.load(ck)?;
    }
    Ok(net)
}

fn pretrain_cmd<R: Real>(a: &PretrainArgs, mut cfg: RunConfig) -> anyhow::Result<()> {
    if let Some(e) = a.epochs {
        cfg.pretrain_epochs = e;
    }
    if let Some(p) = &a.pgm {
        require_file(p, "fusion checkpoint")?;
    }
    let corpus = if a.data.len() == 1 && a.data[0] == "synth" {
        synthetic_corpus::<R>(&cfg)?
    } else {
        let sources = a.data.iter().map(|d| DatasetSource::parse(d)).collect::<Result<Vec<_>, _>>()?;
        sources.iter().map(|s| s.load::<R>()).collect::<anyhow::Result<Vec<_>>>()?
    };
    let mut net = assemble_net::<R>(&cfg, None, a.pgm.as_deref())?;
    let trace = pretrain(&mut net, &corpus, &cfg)?;
    let meta = serde_json::json!({
        "kind": "feature-net",
        "variant": cfg.variant().map(Variant::name),
        "epochs": cfg.pretrain_epochs,
        "sequences": corpus.len(),
        "seed": cfg.seed,
    });
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, net.checkpoint_bytes(meta)?).with_context(|| format!("writing {}", a.out.display()))?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{i},{l:.8}\n"));
    }
    fs::write(with_suffix(&a.out, ".trace.csv"), csv)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

/// A fully resolved tracking run.
struct TrackJob {
    cfg: RunConfig,
    source: DatasetSource,
    settings: TrackSettings,
    checkpoint: Option<PathBuf>,
    pgm: Option<PathBuf>,
}

fn track_cmd(a: &TrackArgs) -> anyhow::Result<()> {
    let recorded = match &a.manifest {
        Some(m) => {
            require_file(m, "manifest")?;
            Some(RunManifest::load(m).map_err(|e| UsageError(format!("{e:#}")))?)
        }
        None => None,
    };
    let job = match &recorded {
        Some(m) => {
            m.verify_inputs()?;
            TrackJob {
                cfg: m.config.clone(),
                source: DatasetSource::parse(&m.settings.dataset)?,
                settings: m.settings.clone(),
                checkpoint: m.checkpoint.as_ref().map(|h| h.path.clone()),
                pgm: m.pgm_checkpoint.as_ref().map(|h| h.path.clone()),
            }
        }
        None => {
            let cfg = a.run.resolve()?;
            let dataset = a.dataset.as_deref().expect("clap requires dataset");
            let source = DatasetSource::parse(dataset)?;
            for (p, what) in [(&a.checkpoint, "checkpoint"), (&a.pgm, "fusion checkpoint")] {
                if let Some(p) = p {
                    require_file(p, what)?;
                }
            }
            TrackJob {
                cfg,
                settings: TrackSettings {
                    dataset: source.describe(),
                    threshold_px: if a.gtot { 5.0 } else { a.threshold },
                    dump_heatmaps: a.dump_heatmaps,
                    dump_flow: a.dump_flow,
                    render: a.render,
                },
                source,
                checkpoint: a.checkpoint.clone(),
                pgm: a.pgm.clone(),
            }
        }
    };
    create_dir(&a.out)?;
    by_precision!(job.cfg.precision, run_track(&job, &a.out))?;

    let fresh = RunManifest {
        tool: "xnet".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: job.cfg.seed,
        config: job.cfg.clone(),
        settings: job.settings.clone(),
        inputs: job.source.files()?.iter().map(|p| HashedFile::of(p)).collect::<anyhow::Result<_>>()?,
        checkpoint: job.checkpoint.as_deref().map(HashedFile::of).transpose()?,
        pgm_checkpoint: job.pgm.as_deref().map(HashedFile::of).transpose()?,
        outputs: hash_tree(&a.out)?,
    };
    fresh.save(&a.out.join(MANIFEST_FILE))?;
    if let Some(m) = &recorded {
        let diff = m.differing_outputs(&fresh);
        if !diff.is_empty() {
            bail!("rerun differs from the recorded run in: {}", diff.join(", "));
        }
        log::info!("rerun reproduced all {} recorded outputs", m.outputs.len());
    }
    Ok(())
}

fn run_track<R: Real>(job: &TrackJob, out: &Path) -> anyhow::Result<()> {
    let cfg = &job.cfg;
    let seq = job.source.load::<R>()?;
    let net = assemble_net::<R>(cfg, job.checkpoint.as_deref(), job.pgm.as_deref())?;
    let opts = TrackOptions { keep_heatmaps: job.settings.dump_heatmaps, keep_flow: job.settings.dump_flow };
    let t0 = std::time::Instant::now();
    let res = track_sequence(&net, &seq, cfg, opts)?;
    log::info!("{}: {} frames in {:.1?}", seq.name, seq.len(), t0.elapsed());

    write_results(&out.join("results.csv"), &res.rows)?;
    let report = MetricsReport::compute(&res.boxes(), &seq.gt, job.settings.threshold_px)?;
    write_metrics(out, &report)?;
    write_json(&out.join("stages.json"), &res.counters)?;
    log::info!("PR@{} {:.4} SR-AUC {:.4}", report.threshold_px, report.pr_at, report.sr_auc);

    if job.settings.dump_heatmaps {
        let dir = out.join("heatmaps");
        create_dir(&dir)?;
        for (t, h) in res.heatmaps.iter().enumerate() {
            if let Some(h) = h {
                heatmap_image(h).save(dir.join(format!("{:05}.png", t + 1)))?;
            }
        }
    }
    if job.settings.dump_flow {
        let mut csv = String::from("frame,point_x,point_y,dx,dy,kept\n");
        for (t, pts) in res.flow.iter().enumerate() {
            for p in pts.iter().flatten() {
                csv.push_str(&format!("{t},{:.4},{:.4},{:.6},{:.6},{}\n", p.x, p.y, p.dx, p.dy, u8::from(p.kept)));
            }
        }
        fs::write(out.join("flow.csv"), csv)?;
    }
    if job.settings.render {
        let dir = out.join("render");
        create_dir(&dir)?;
        for (t, (pair, row)) in seq.frames.iter().zip(&res.rows).enumerate() {
            let mut img = rgb_to_image(&pair.rgb);
            render::draw_box(&mut img, &seq.gt[t], render::TRUTH);
            render::draw_box(&mut img, &row.bbox, render::PRED);
            img.save(dir.join(format!("{:05}.png", t + 1)))?;
        }
    }
    Ok(())
}

fn write_metrics(out: &Path, report: &MetricsReport) -> anyhow::Result<()> {
    write_json(&out.join("metrics.json"), report)?;
    fs::write(out.join("pr.csv"), report.pr_csv())?;
    fs::write(out.join("sr.csv"), report.sr_csv())?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> anyhow::Result<()> {
    require_file(&a.results, "results file")?;
    let source = DatasetSource::parse(&a.dataset)?;
    let rows = read_results(&a.results)?;
    let gt = source.ground_truth()?;
    let boxes: Vec<_> = rows.iter().map(|r| r.bbox).collect();
    let report = MetricsReport::compute(&boxes, &gt, if a.gtot { 5.0 } else { a.threshold })?;
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write_metrics(dir, &report)
        }
        None => {
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn synth_gen(a: &SynthGenArgs) -> anyhow::Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            require_file(p, "spec")?;
            DatasetSource::Synth(Some(p.clone())).spec()?.expect("synthetic source")
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed.map(Ok).or_else(env_seed).transpose()? {
        spec.seed = s;
    }
    spec.validate().map_err(|e| UsageError(e.to_string()))?;
    let seq = synth_sequence::<f64>(&spec)?;
    save_sequence(&seq, &a.out)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    log::info!("wrote {} frames of {} to {}", seq.len(), spec.name(), a.out.display());
    Ok(())
}

fn dump_heatmaps<R: Real>(a: &DumpHeatmapsArgs, cfg: RunConfig) -> anyhow::Result<()> {
    if !cfg.fim {
        return Err(UsageError("heat maps need the interaction module (variant v3 or full)".into()).into());
    }
    let source = DatasetSource::parse(&a.dataset)?;
    for (p, what) in [(&a.checkpoint, "checkpoint"), (&a.pgm, "fusion checkpoint")] {
        if let Some(p) = p {
            require_file(p, what)?;
        }
    }
    let seq = source.load::<R>()?;
    let net = assemble_net::<R>(&cfg, a.checkpoint.as_deref(), a.pgm.as_deref())?;
    create_dir(&a.out)?;
    for (t, pair) in seq.frames.iter().enumerate() {
        let feats = net.features(&mut pair.clone())?;
        let plane = match feats.attention {
            Some(h) => h,
            None => channel_mean(&feats.fused),
        };
        heatmap_image(&plane).save(a.out.join(format!("{:05}.png", t + 1)))?;
    }
    log::info!("wrote {} heat maps to {}", seq.len(), a.out.display());
    Ok(())
}
