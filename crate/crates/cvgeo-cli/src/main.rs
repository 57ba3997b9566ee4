//! `cvgeo`: synthesize cross-view scenes, train and evaluate the
//! click-to-satellite localizer, export encodings/attention maps, and run
//! ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage, 2 input validation, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cvgeo::data::{synth_generate, DatasetManifest, Split, SynthConfig};
use cvgeo::model::backbone::BackboneConfig;
use cvgeo::run::{
    run_encode, run_eval, run_sweep, run_train, EncodeRequest, EvalSource, RunConfig,
    SweepFamilies, SweepOptions,
};
use cvgeo::vspe::{ClickPoint, GroundKernel, View};
use cvgeo::Error;

/// Output-root environment variable: relative `--out` paths are created
/// beneath it when set.
const OUT_ROOT_ENV: &str = "CVGEO_OUT_ROOT";

#[derive(Parser)]
#[command(name = "cvgeo", version, about = "Cross-view object geo-localization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cross-view dataset.
    Synth(SynthArgs),
    /// Train a localizer on a manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the annotation oracle) on a manifest.
    Eval(EvalArgs),
    /// Export positional-encoding maps and attention heatmaps.
    Encode(EncodeArgs),
    /// Run the sigma / ring-weight ablation sweeps end to end.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples to generate.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_view)]
    view: View,
    #[arg(long)]
    out: PathBuf,
    /// Query image size as HxW (defaults per view).
    #[arg(long, value_parser = parse_dims)]
    query_size: Option<(usize, usize)>,
    /// Reference image size as HxW.
    #[arg(long, value_parser = parse_dims)]
    ref_size: Option<(usize, usize)>,
}

#[derive(Args, Clone)]
struct ConfigOverrides {
    /// Start from this run-config JSON (e.g. an emitted run_config.json).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset: toy is the desk-scale smoke setup.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_parser = parse_view)]
    view: Option<View>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    halve_every: Option<usize>,
    /// Ground-encoder decay scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// Ground-encoder kernel: gaussian | laplace.
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<GroundKernel>,
    /// Drone ring weights inside-out, e.g. 0.6,0.15,0.15,0.1
    #[arg(long, value_parser = parse_weights)]
    ring_weights: Option<[f64; 4]>,
    /// Spatial-attention kernel size (odd).
    #[arg(long)]
    csha_kernel: Option<usize>,
    /// Channel-attention reduction ratio.
    #[arg(long)]
    reduction: Option<usize>,
    /// Backbone: toy-small | resnet18 | darknet53.
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long, value_parser = parse_dims)]
    query_size: Option<(usize, usize)>,
    #[arg(long, value_parser = parse_dims)]
    ref_size: Option<(usize, usize)>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest produced by `synth` (or an adapter).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to evaluate; its embedded config drives the pipeline.
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the annotations against themselves (plumbing check).
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    out: PathBuf,
    /// Click point as ROW,COL.
    #[arg(long, value_parser = parse_click)]
    click: (usize, usize),
    /// Query image to encode (otherwise an empty map of --height/--width).
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Also export the model's attention maps for --image.
    #[arg(long)]
    attn: bool,
    /// Checkpoint providing the attention model (fresh init otherwise).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    out: PathBuf,
    /// Which ablation family to run: sigma | rings | both.
    #[arg(long, default_value = "both")]
    family: String,
    /// Sigma grid, e.g. 5,15,25,50
    #[arg(long, value_parser = parse_grid)]
    sigma_grid: Option<Vec<f64>>,
    /// Synthetic samples per family.
    #[arg(long, default_value_t = 12)]
    n: usize,
    #[arg(long, default_value_t = 9)]
    data_seed: u64,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

fn parse_view(s: &str) -> Result<View, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kernel(s: &str) -> Result<GroundKernel, String> {
    match s {
        "gaussian" => Ok(GroundKernel::Gaussian),
        "laplace" => Ok(GroundKernel::Laplace),
        other => Err(format!("unknown kernel {other:?} (gaussian | laplace)")),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    Ok((
        h.trim().parse().map_err(|e| format!("bad height: {e}"))?,
        w.trim().parse().map_err(|e| format!("bad width: {e}"))?,
    ))
}

fn parse_click(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(',')
        .ok_or_else(|| format!("expected ROW,COL, got {s:?}"))?;
    Ok((
        r.trim().parse().map_err(|e| format!("bad row: {e}"))?,
        c.trim().parse().map_err(|e| format!("bad col: {e}"))?,
    ))
}

fn parse_weights(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("bad weight: {e}")))
        .collect::<Result<_, String>>()?;
    let arr: [f64; 4] = parts
        .try_into()
        .map_err(|_| "expected exactly four ring weights".to_string())?;
    Ok(arr)
}

fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("bad sigma: {e}")))
        .collect()
}

/// Applies the output-root environment variable to relative paths.
fn rooted(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

/// Builds the resolved run config: preset/default, then config file, then
/// individual flags (flags win).
fn resolve_config(o: &ConfigOverrides, fallback_view: View) -> Result<RunConfig, Error> {
    let view = o.view.unwrap_or(fallback_view);
    let mut run = match o.preset.as_deref() {
        Some("toy") | Some("toy-small") => RunConfig::toy(view),
        Some("full") | None => RunConfig::default_for_view(view),
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown preset {other:?} (toy | full)"
            )))
        }
    };
    if let Some(path) = &o.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {path:?}: {e}")))?;
        run = serde_json::from_str(&text)?;
        if let Some(v) = o.view {
            run.view = v;
        }
    }
    if let Some(v) = o.seed {
        run.seed = v;
    }
    if let Some(v) = o.lr {
        run.train.lr0 = v;
    }
    if let Some(v) = o.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = o.epochs {
        run.train.epochs = v;
    }
    if let Some(v) = o.halve_every {
        run.train.halve_every = v;
    }
    if let Some(v) = o.sigma {
        run.ground.sigma = v;
    }
    if let Some(v) = o.kernel {
        run.ground.kernel = v;
    }
    if let Some(v) = o.ring_weights {
        run.drone.weights = v;
    }
    if let Some(v) = o.csha_kernel {
        run.csha.kernel_size = v;
    }
    if let Some(v) = o.reduction {
        run.csha.reduction = v;
    }
    if let Some(name) = &o.backbone {
        run.backbone = BackboneConfig::from_preset(name)?;
    }
    if let Some(v) = o.query_size {
        run.query_size = v;
    }
    if let Some(v) = o.ref_size {
        run.reference_size = v;
    }
    Ok(run)
}

fn emit(event: serde_json::Value) {
    println!("{event}");
}

/// Separates bad flag combinations (usage, exit 1) from domain errors.
enum CmdError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Lib(e)
    }
}

fn usage(msg: impl Into<String>) -> CmdError {
    CmdError::Usage(msg.into())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), CmdError> {
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut cfg = SynthConfig::new(args.n, args.seed, args.view).with_split(Split::Train);
    if let Some(q) = args.query_size {
        cfg.query_size = q;
    }
    if let Some(r) = args.ref_size {
        cfg.reference_size = r;
    }
    let out = rooted(&args.out);
    let manifest = synth_generate(&cfg, &out)?;
    emit(json!({
        "event": "synth",
        "samples": manifest.len(),
        "view": args.view.to_string(),
        "manifest": out.join("manifest.jsonl"),
    }));
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CmdError> {
    let manifest = DatasetManifest::load(&args.data)?;
    let fallback_view = manifest
        .samples
        .first()
        .map(|s| s.view)
        .unwrap_or(View::Ground);
    let run = resolve_config(&args.overrides, fallback_view)?;
    let out = rooted(&args.out);
    emit(json!({
        "event": "train_start",
        "samples": manifest.len(),
        "epochs": run.train.epochs,
        "out": out,
    }));
    let outcome = run_train(&run, &manifest, &out)?;
    emit(json!({
        "event": "train_end",
        "steps": outcome.losses.len(),
        "initial_loss": outcome.losses.first(),
        "final_loss": outcome.losses.last(),
        "checkpoint": outcome.checkpoint,
        "log": outcome.log,
    }));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CmdError> {
    let manifest = DatasetManifest::load(&args.data)?;
    let out = rooted(&args.out);
    let source = if args.oracle {
        let fallback_view = manifest
            .samples
            .first()
            .map(|s| s.view)
            .unwrap_or(View::Ground);
        EvalSource::Oracle {
            run: Box::new(resolve_config(&args.overrides, fallback_view)?),
        }
    } else {
        let path = args
            .checkpoint
            .as_deref()
            .ok_or_else(|| usage("eval needs --checkpoint or --oracle"))?;
        if !path.is_file() {
            return Err(CmdError::Lib(Error::Validation(format!(
                "checkpoint {path:?} does not exist"
            ))));
        }
        EvalSource::Checkpoint(path)
    };
    let outcome = run_eval(source, &manifest, &out)?;
    emit(json!({
        "event": "eval",
        "n_samples": outcome.report.n_samples,
        "acc_at_25": outcome.report.acc_at_25,
        "acc_at_50": outcome.report.acc_at_50,
        "mean_iou": outcome.report.mean_iou,
        "report": outcome.report_json,
    }));
    Ok(())
}

fn cmd_encode(args: &EncodeArgs) -> Result<(), CmdError> {
    let run = resolve_config(&args.overrides, View::Ground)?;
    let dims = match (args.height, args.width) {
        (Some(h), Some(w)) => Some((h, w)),
        (None, None) => None,
        _ => return Err(usage("--height and --width must be given together")),
    };
    if args.image.is_none() && dims.is_none() {
        return Err(usage("encode needs --image or --height/--width"));
    }
    let request = EncodeRequest {
        run,
        click: ClickPoint::new(args.click.0, args.click.1),
        dims,
        image: args.image.clone(),
        attention: args.attn,
        checkpoint: args.checkpoint.clone(),
    };
    let out = rooted(&args.out);
    let outcome = run_encode(&request, &out)?;
    emit(json!({
        "event": "encode",
        "height": outcome.map.height(),
        "width": outcome.map.width(),
        "peak": outcome.map.peak(),
        "files": outcome.files,
    }));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CmdError> {
    let families = match args.family.as_str() {
        "sigma" => SweepFamilies::Sigma,
        "rings" => SweepFamilies::Rings,
        "both" => SweepFamilies::Both,
        other => return Err(usage(format!("unknown family {other:?} (sigma | rings | both)"))),
    };
    if args.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut base = resolve_config(&args.overrides, View::Drone)?;
    if args.overrides.preset.is_none() && args.overrides.config.is_none() {
        // sweeps default to the desk-scale preset; full-scale runs take
        // hours and need an explicit config
        base = RunConfig::toy(View::Drone);
    }
    let opts = SweepOptions {
        families,
        sigma_grid: args
            .sigma_grid
            .clone()
            .unwrap_or_else(|| vec![5.0, 15.0, 25.0, 50.0]),
        n_samples: args.n,
        data_seed: args.data_seed,
    };
    let out = rooted(&args.out);
    let rows = run_sweep(&base, &opts, &out)?;
    for row in &rows {
        emit(serde_json::to_value(row)?);
    }
    emit(json!({
        "event": "sweep_end",
        "rows": rows.len(),
        "table": out.join("sweep.txt"),
    }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // keep clap's help/version on stdout with success status
            let kind = err.kind();
            let _ = err.print();
            return match kind {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Encode(args) => cmd_encode(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(CmdError::Lib(err)) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
