//! Resolved run configuration and the end-to-end drivers behind the CLI
//! subcommands: training, evaluation, encoding export and ablation sweeps.
//!
//! Every artifact a driver writes (checkpoint, report, exported map) either
//! embeds the resolved [`RunConfig`] or gets a `run_config.json` sidecar, so
//! runs are reproducible from their outputs alone.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::csha::CshaConfig;
use crate::data::images::{image_dims, load_rgb_tensor, resize_rgb, save_grayscale_map};
use crate::data::{synth_generate, DatasetManifest, PreparedDataset, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, ModelPredictor, OraclePredictor};
use crate::model::backbone::BackboneConfig;
use crate::model::checkpoint::Checkpoint;
use crate::model::train::{lr_schedule, train_step, Adam, TrainConfig};
use crate::model::{GeoLocalizer, ModelConfig};
use crate::nn::Session;
use crate::vspe::{
    drone_encoding, ground_encoding, ClickPoint, DroneEncodingConfig, EncodingMap,
    GroundEncodingConfig, View, RING_WEIGHT_PRESETS,
};

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub view: View,
    pub ground: GroundEncodingConfig,
    pub drone: DroneEncodingConfig,
    pub csha: CshaConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    /// Query image size `(height, width)` fed to the model.
    pub query_size: (usize, usize),
    /// Reference image size `(height, width)` fed to the model.
    pub reference_size: (usize, usize),
}

impl RunConfig {
    /// Full-scale defaults for a view (desk-scale backbone, published
    /// schedule and encoder settings).
    pub fn default_for_view(view: View) -> Self {
        Self {
            seed: 0,
            view,
            ground: GroundEncodingConfig::default(),
            drone: DroneEncodingConfig::default(),
            csha: CshaConfig::default(),
            backbone: BackboneConfig::ToySmall,
            train: TrainConfig::default(),
            query_size: match view {
                View::Ground => (256, 512),
                View::Drone => (256, 256),
            },
            reference_size: (1024, 1024),
        }
    }

    /// Small smoke-test preset: tiny images and an aggressive short
    /// schedule that overfits a handful of synthetic scenes in seconds.
    pub fn toy(view: View) -> Self {
        Self {
            train: TrainConfig {
                lr0: 3e-3,
                halve_every: 40,
                batch_size: 8,
                epochs: 30,
            },
            query_size: match view {
                View::Ground => (64, 128),
                View::Drone => (64, 64),
            },
            reference_size: (80, 80),
            ..Self::default_for_view(view)
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.backbone.clone(), self.csha.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.csha.validate()?;
        let stride = self.backbone.stride();
        for (name, (h, w)) in [("query", self.query_size), ("reference", self.reference_size)] {
            if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
                return Err(Error::Config(format!(
                    "{name} size {h}x{w} must be divisible by the backbone stride {stride}"
                )));
            }
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }

    /// Builds the positional-encoding map this run would attach for a click
    /// at the given image size.
    pub fn encoding_for(
        &self,
        height: usize,
        width: usize,
        click: ClickPoint,
    ) -> Result<EncodingMap> {
        match self.view {
            View::Ground => ground_encoding(height, width, click, &self.ground),
            View::Drone => drone_encoding(height, width, click, &self.drone),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ---- training --------------------------------------------------------------

/// Artifacts and history of one training run.
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Loss per optimizer step, in order.
    pub losses: Vec<f64>,
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a model on a manifest and writes `checkpoint.json`,
/// `run_config.json` and a line-oriented `train_log.jsonl` under `out_dir`.
pub fn run_train(run: &RunConfig, manifest: &DatasetManifest, out_dir: &Path) -> Result<TrainOutcome> {
    run.validate()?;
    fs::create_dir_all(out_dir)?;
    let dataset = PreparedDataset::load(manifest, run)?;
    let mut model = GeoLocalizer::new(run.model_config(), run.seed)?;
    model.set_anchor(dataset.anchor.0, dataset.anchor.1)?;
    let mut adam = Adam::new();

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path)?;
    writeln!(
        log,
        "{}",
        json!({
            "event": "start",
            "samples": dataset.len(),
            "trainable_scalars": model.params.trainable_scalars(),
            "anchor": [model.config().anchor_w, model.config().anchor_h],
            "config": serde_json::to_value(run)?,
        })
    )?;

    // batch-shuffle stream kept distinct from the model-init seed
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ SHUFFLE_SEED_SALT);
    let mut losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..run.train.epochs {
        let lr = lr_schedule(epoch, &run.train);
        let mut indices: Vec<usize> = (0..dataset.len()).collect();
        indices.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in indices.chunks(run.train.batch_size) {
            let batch = dataset.batch(chunk);
            let loss = train_step(&mut model, &mut adam, &batch, lr)?;
            losses.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;
            step += 1;
            writeln!(
                log,
                "{}",
                json!({"event": "step", "step": step, "epoch": epoch, "lr": lr, "loss": loss})
            )?;
        }
        let mean = epoch_sum / epoch_batches as f64;
        epoch_losses.push(mean);
        writeln!(
            log,
            "{}",
            json!({"event": "epoch", "epoch": epoch, "lr": lr, "mean_loss": mean})
        )?;
    }

    let checkpoint_path = out_dir.join("checkpoint.json");
    Checkpoint::capture(&model, Some(&adam), run.train.epochs, run).save(&checkpoint_path)?;
    write_json(&out_dir.join("run_config.json"), run)?;
    writeln!(
        log,
        "{}",
        json!({"event": "end", "steps": step, "final_loss": losses.last()})
    )?;
    Ok(TrainOutcome {
        checkpoint: checkpoint_path,
        log: log_path,
        losses,
        epoch_losses,
    })
}

const SHUFFLE_SEED_SALT: u64 = 0x73687566666c65; // "shuffle"

// ---- evaluation -------------------------------------------------------------

/// What to evaluate: a trained checkpoint or the annotation oracle.
pub enum EvalSource<'a> {
    Checkpoint(&'a Path),
    /// Scores the ground-truth annotations against themselves; checks the
    /// evaluation plumbing and should reach acc 1.0.
    Oracle { run: Box<RunConfig> },
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub report_json: PathBuf,
    pub report_txt: PathBuf,
}

/// Evaluates over a manifest and writes `report.json` (machine-readable,
/// config embedded) plus `report.txt` under `out_dir`.
pub fn run_eval(
    source: EvalSource,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    fs::create_dir_all(out_dir)?;
    let (report, run) = match source {
        EvalSource::Oracle { run } => (evaluate(&OraclePredictor, manifest)?, *run),
        EvalSource::Checkpoint(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (model, _, _) = ckpt.restore()?;
            let run = ckpt.run.clone();
            let predictor = ModelPredictor {
                model: &model,
                run: &run,
            };
            (evaluate(&predictor, manifest)?, run)
        }
    };
    let report_json = out_dir.join("report.json");
    write_json(
        &report_json,
        &json!({"config": serde_json::to_value(&run)?, "report": serde_json::to_value(report)?}),
    )?;
    let report_txt = out_dir.join("report.txt");
    fs::write(
        &report_txt,
        format!(
            "samples:  {}\nmean IoU: {:.4}\nacc@0.25: {:.4}\nacc@0.50: {:.4}\n",
            report.n_samples, report.mean_iou, report.acc_at_25, report.acc_at_50
        ),
    )?;
    Ok(EvalOutcome {
        report,
        report_json,
        report_txt,
    })
}

// ---- encoding / attention export ---------------------------------------------

/// Inputs for the `encode` driver.
pub struct EncodeRequest {
    pub run: RunConfig,
    pub click: ClickPoint,
    /// Explicit map size `(height, width)`; defaults to the image size or
    /// the run's query size.
    pub dims: Option<(usize, usize)>,
    /// Query image to encode (required for attention export).
    pub image: Option<PathBuf>,
    pub attention: bool,
    pub checkpoint: Option<PathBuf>,
}

pub struct EncodeOutcome {
    pub files: Vec<PathBuf>,
    pub map: EncodingMap,
}

/// Writes the encoding map as a binary container plus a grayscale PNG, and
/// optionally the attention heatmaps of a (fresh or restored) model.
pub fn run_encode(req: &EncodeRequest, out_dir: &Path) -> Result<EncodeOutcome> {
    fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let dims = match (&req.image, req.dims) {
        (_, Some(d)) => d,
        (Some(path), None) => image_dims(path)?,
        (None, None) => req.run.query_size,
    };
    let map = req.run.encoding_for(dims.0, dims.1, req.click)?;

    let container_path = out_dir.join("encoding.cvt");
    container::write_f32(
        &container_path,
        &[map.height(), map.width()],
        map.values.iter().copied(),
    )?;
    files.push(container_path);

    let png_path = out_dir.join("encoding.png");
    save_grayscale_map(&png_path, &map.values)?;
    files.push(png_path);

    if req.attention {
        let image_path = req
            .image
            .as_ref()
            .ok_or_else(|| Error::Config("attention export needs --image".into()))?;
        files.extend(export_attention(req, image_path, out_dir)?);
    }

    let config_path = out_dir.join("run_config.json");
    write_json(&config_path, &req.run)?;
    files.push(config_path);
    Ok(EncodeOutcome { files, map })
}

fn export_attention(req: &EncodeRequest, image_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (model, run) = match &req.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let (model, _, _) = ckpt.restore()?;
            (model, ckpt.run)
        }
        None => (
            GeoLocalizer::new(req.run.model_config(), req.run.seed)?,
            req.run.clone(),
        ),
    };
    let image = load_rgb_tensor(image_path)?;
    let (_, h, w) = image.dim();
    let image = resize_rgb(&image, run.query_size);
    let click = req.click.rescaled((h, w), run.query_size);
    let map = run.encoding_for(run.query_size.0, run.query_size.1, click)?;
    let encoded = crate::vspe::attach_encoding(&image, &map)?;

    let mut sess = Session::new(&model.params, false);
    let (c, qh, qw) = encoded.dim();
    let input = sess.input(
        encoded
            .into_shape_with_order((1, c, qh, qw))
            .expect("contiguous")
            .into_dyn(),
    );
    let (_, detail) = model.query_branch_detailed(&mut sess, input)?;

    let spatial = sess.tape.value(detail.spatial_weights);
    let (fh, fw) = (spatial.shape()[2], spatial.shape()[3]);
    let upscaled = Array2::from_shape_fn((qh, qw), |(i, j)| {
        spatial[[0, 0, i * fh / qh, j * fw / qw]]
    });
    let spatial_path = out_dir.join("spatial_attention.png");
    save_grayscale_map(&spatial_path, &upscaled)?;

    let channel: Vec<f64> = sess
        .tape
        .value(detail.channel_weights)
        .iter()
        .copied()
        .collect();
    let channel_path = out_dir.join("channel_weights.json");
    write_json(&channel_path, &json!({ "weights": channel }))?;
    Ok(vec![spatial_path, channel_path])
}

// ---- ablation sweeps ----------------------------------------------------------

/// Which ablation families to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepFamilies {
    Sigma,
    Rings,
    Both,
}

pub struct SweepOptions {
    pub families: SweepFamilies,
    pub sigma_grid: Vec<f64>,
    /// Synthetic samples per family dataset.
    pub n_samples: usize,
    pub data_seed: u64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            families: SweepFamilies::Both,
            sigma_grid: vec![5.0, 15.0, 25.0, 50.0],
            n_samples: 12,
            data_seed: 9,
        }
    }
}

/// One sweep result row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub family: String,
    pub label: String,
    pub rank: usize,
    pub acc_at_25: f64,
    pub acc_at_50: f64,
    pub mean_iou: f64,
    pub final_loss: f64,
}

/// Runs the requested ablations end to end on self-generated synthetic
/// data: train a model per setting, evaluate it, and emit a ranked table
/// (`sweep.jsonl` + `sweep.txt`).
pub fn run_sweep(base: &RunConfig, opts: &SweepOptions, out_dir: &Path) -> Result<Vec<SweepRow>> {
    fs::create_dir_all(out_dir)?;
    if opts.sigma_grid.is_empty() && matches!(opts.families, SweepFamilies::Sigma) {
        return Err(Error::Config("sigma sweep requested with an empty grid".into()));
    }
    let mut rows = Vec::new();

    let run_setting = |run: &RunConfig,
                       manifest: &DatasetManifest,
                       dir: &Path|
     -> Result<(EvalReport, f64)> {
        let outcome = run_train(run, manifest, dir)?;
        let eval = run_eval(EvalSource::Checkpoint(&outcome.checkpoint), manifest, dir)?;
        Ok((eval.report, *outcome.losses.last().unwrap_or(&f64::NAN)))
    };

    if matches!(opts.families, SweepFamilies::Sigma | SweepFamilies::Both) {
        let view = View::Ground;
        let data_dir = out_dir.join("data_ground");
        let cfg = SynthConfig {
            n: opts.n_samples,
            seed: opts.data_seed,
            view,
            query_size: sweep_query_size(base, view),
            reference_size: base.reference_size,
            split: crate::data::Split::Train,
        };
        let manifest = synth_generate(&cfg, &data_dir)?;
        let mut family_rows = Vec::new();
        for &sigma in &opts.sigma_grid {
            let mut run = base.clone();
            run.view = view;
            run.query_size = cfg.query_size;
            run.ground.sigma = sigma;
            let dir = out_dir.join(format!("runs/sigma_{sigma}"));
            let (report, final_loss) = run_setting(&run, &manifest, &dir)?;
            family_rows.push(SweepRow {
                family: "sigma".into(),
                label: format!("sigma={sigma}"),
                rank: 0,
                acc_at_25: report.acc_at_25,
                acc_at_50: report.acc_at_50,
                mean_iou: report.mean_iou,
                final_loss,
            });
        }
        rank_rows(&mut family_rows);
        rows.extend(family_rows);
    }

    if matches!(opts.families, SweepFamilies::Rings | SweepFamilies::Both) {
        let view = View::Drone;
        let data_dir = out_dir.join("data_drone");
        let cfg = SynthConfig {
            n: opts.n_samples,
            seed: opts.data_seed,
            view,
            query_size: sweep_query_size(base, view),
            reference_size: base.reference_size,
            split: crate::data::Split::Train,
        };
        let manifest = synth_generate(&cfg, &data_dir)?;
        let mut family_rows = Vec::new();
        for (i, weights) in RING_WEIGHT_PRESETS.iter().enumerate() {
            let mut run = base.clone();
            run.view = view;
            run.query_size = cfg.query_size;
            run.drone.weights = *weights;
            let dir = out_dir.join(format!("runs/rings_{i}"));
            let (report, final_loss) = run_setting(&run, &manifest, &dir)?;
            family_rows.push(SweepRow {
                family: "ring-weights".into(),
                label: format!(
                    "[{:.2},{:.2},{:.2},{:.2}]",
                    weights[0], weights[1], weights[2], weights[3]
                ),
                rank: 0,
                acc_at_25: report.acc_at_25,
                acc_at_50: report.acc_at_50,
                mean_iou: report.mean_iou,
                final_loss,
            });
        }
        rank_rows(&mut family_rows);
        rows.extend(family_rows);
    }

    let jsonl_path = out_dir.join("sweep.jsonl");
    let mut jsonl = fs::File::create(&jsonl_path)?;
    for row in &rows {
        writeln!(jsonl, "{}", serde_json::to_string(row)?)?;
    }
    let mut table = String::from("family        rank  label                          acc@0.25  acc@0.50  mean IoU\n");
    for row in &rows {
        table.push_str(&format!(
            "{:<12}  {:>4}  {:<30} {:>8.4}  {:>8.4}  {:>8.4}\n",
            row.family, row.rank, row.label, row.acc_at_25, row.acc_at_50, row.mean_iou
        ));
    }
    fs::write(out_dir.join("sweep.txt"), table)?;
    write_json(&out_dir.join("sweep_config.json"), base)?;
    Ok(rows)
}

/// Query dims per sweep family: ground keeps a 1:2 panorama aspect, drone
/// stays square; the scale comes from the base config.
fn sweep_query_size(base: &RunConfig, view: View) -> (usize, usize) {
    let h = base.query_size.0;
    match view {
        View::Ground => (h, 2 * h),
        View::Drone => (h, h),
    }
}

/// Sorts by acc@0.5, then acc@0.25, then mean IoU (descending) and assigns
/// 1-based ranks; label order breaks exact ties deterministically.
fn rank_rows(rows: &mut [SweepRow]) {
    rows.sort_by(|a, b| {
        b.acc_at_50
            .partial_cmp(&a.acc_at_50)
            .unwrap()
            .then(b.acc_at_25.partial_cmp(&a.acc_at_25).unwrap())
            .then(b.mean_iou.partial_cmp(&a.mean_iou).unwrap())
            .then(a.label.cmp(&b.label))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
}
