//! Command-line front end. Every artifact-producing command writes one
//! `RunManifest` next to its outputs.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::e2net::E2NetConfig;
use crate::error::{Error, Result};
use crate::ingest::{self, LabelVolume};
use crate::metrics::{cases_csv, summarize, CaseMetrics};
use crate::model::{Model, ModelConfig};
use crate::nn::{EncoderConfig, R2UNetConfig};
use crate::phantom::{self, Manifest, PhantomSpec};
use crate::pipeline::{render_overlay, segment_volume, InferenceOptions};
use crate::trainer::{
    ablation_csv, fit_stage1, fit_stage2, load_case, run_ablation, slices_of, AblationVariant, Case, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "e2net", version, about = "Two-stage liver and tumor segmentation on CT volumes")]
pub struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    GenPhantoms(GenArgs),
    /// Train the stage-1 liver network on the manifest's training split.
    TrainStage1(TrainArgs),
    /// Train the stage-2 network on ground-truth liver crops.
    TrainStage2(TrainStage2Args),
    /// Segment CT volumes with a stage-1 and a stage-2 checkpoint.
    Infer(InferArgs),
    /// Score predicted label volumes against references.
    Eval(EvalArgs),
    /// Train and score the five stage-2 configurations with one budget.
    Ablation(AblationArgs),
    /// Write per-slice PNGs with liver and tumor contours.
    RenderOverlay(OverlayArgs),
    /// Print architecture, heads and parameter count.
    ModelSummary(SummaryArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of cases.
    #[arg(long)]
    pub n: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Case i uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Phantom parameters as TOML; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train, validation and test fractions.
    #[arg(long, num_args = 3, value_names = ["TRAIN", "VAL", "TEST"], default_values_t = [0.7, 0.15, 0.15])]
    pub split: Vec<f64>,
    /// Volume shape as depth, height, width.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub shape: Option<Vec<usize>>,
    /// Inclusive range of tumors per case.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub tumors: Option<Vec<usize>>,
    /// Gaussian noise in HU.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

/// Training flags shared by both stages. Each overrides the config file.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory holding `manifest.toml`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration as TOML.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub samples_per_epoch: Option<usize>,
    #[arg(long)]
    pub val_samples: Option<usize>,
    /// Validate on the training split instead of the validation split.
    #[arg(long)]
    pub val_on_train: bool,
    /// Encoder width at the first level.
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
    /// Per-epoch losses as JSON lines (default: next to the checkpoint).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Case-loading threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    Edge,
    Dist,
    EdgeDcff,
    DistDcff,
}

impl From<Variant> for AblationVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Baseline => AblationVariant::Baseline,
            Variant::Edge => AblationVariant::Edge,
            Variant::Dist => AblationVariant::Dist,
            Variant::EdgeDcff => AblationVariant::EdgeDcff,
            Variant::DistDcff => AblationVariant::DistDcff,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainStage2Args {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Network configuration; the full model is `dist-dcff`.
    #[arg(long, value_enum, default_value = "dist-dcff")]
    pub variant: Variant,
    #[arg(long)]
    pub stage2_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// A CT volume, or a dataset directory (then `--split` selects cases).
    #[arg(long)]
    pub ct: PathBuf,
    #[arg(long)]
    pub stage1: PathBuf,
    #[arg(long)]
    pub stage2: PathBuf,
    /// Output label file, or a directory when `--ct` is a dataset.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
    /// Keep only the largest stage-1 component before cropping.
    #[arg(long)]
    pub largest_component: bool,
    /// Accepted for interface symmetry; inference has no randomness.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<case>_pred.nii.gz` (or `_seg`) files.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of reference `<case>_seg.nii.gz` files.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblationArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage-1 checkpoint used to score every variant.
    #[arg(long)]
    pub stage1: PathBuf,
    /// Split the variants are scored on.
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    #[arg(long)]
    pub ct: PathBuf,
    /// Predicted label volume.
    #[arg(long)]
    pub pred: PathBuf,
    /// Optional reference label volume, drawn in blue.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Arch {
    R2unet,
    Baseline,
    TwoBranch,
    E2net,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Describe a saved checkpoint.
    #[arg(long, conflicts_with = "arch")]
    pub checkpoint: Option<PathBuf>,
    /// Describe a freshly built architecture.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    #[arg(long, default_value_t = 16)]
    pub base_width: usize,
}

/// Provenance record written by every artifact-producing command.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 over the names and bytes of every input file.
    pub input_hash: String,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
    pub version: String,
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of `paths` in sorted order; directories contribute every
/// file below them.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    files.sort();
    files.dedup();
    let mut h = Sha256::new();
    for f in &files {
        let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
        h.update(f.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn collect_files(p: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_dir() {
        for entry in std::fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let path = entry.map_err(|e| Error::io(p, e))?.path();
            if path.file_name().is_some_and(|n| n != RUN_MANIFEST) {
                collect_files(&path, out)?;
            }
        }
    } else {
        out.push(p.to_path_buf());
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn write_manifest(path: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Manifest location for a file output: `model.ckpt` → `model.ckpt.run.json`.
fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    file.with_file_name(name)
}

struct Run {
    command: &'static str,
    start: Instant,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, inputs: Vec<PathBuf>) -> Self {
        Run { command, start: Instant::now(), inputs }
    }

    fn finish(self, config: serde_json::Value, seed: u64, outputs: Vec<PathBuf>, at: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            config,
            seed,
            input_hash: hash_inputs(&self.inputs)?,
            outputs,
            duration_secs: self.start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").into(),
        };
        write_manifest(at, &m)
    }
}

/// Loads cases on up to `workers` threads, preserving order.
pub fn load_cases_parallel(dir: &Path, ids: &[String], workers: usize) -> Result<Vec<Case>> {
    let workers = workers.clamp(1, ids.len().max(1));
    let chunk = ids.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = ids
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|id| load_case(dir, id)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut cases = Vec::with_capacity(ids.len());
        for h in handles {
            cases.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(cases)
    })
}

fn split_ids<'a>(m: &'a Manifest, split: &str) -> Result<&'a [String]> {
    match split {
        "train" => Ok(&m.splits.train),
        "val" => Ok(&m.splits.val),
        "test" => Ok(&m.splits.test),
        other => Err(Error::Validation(format!("unknown split {other:?} (train, val, test)"))),
    }
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr0 = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if self.samples_per_epoch.is_some() {
            cfg.samples_per_epoch = self.samples_per_epoch;
        }
        if self.val_samples.is_some() {
            cfg.val_samples = self.val_samples;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn encoder(&self) -> EncoderConfig {
        EncoderConfig { base_width: self.base_width, ..EncoderConfig::default() }
    }

    /// Training and validation cases from the manifest. An empty
    /// validation split falls back to the training cases.
    fn cases(&self) -> Result<(Vec<Case>, Vec<Case>)> {
        let m = Manifest::load(&self.data)?;
        if m.splits.train.is_empty() {
            return Err(Error::Validation("the manifest has no training cases".into()));
        }
        let train = load_cases_parallel(&self.data, &m.splits.train, self.workers)?;
        let val = if self.val_on_train || m.splits.val.is_empty() {
            train.clone()
        } else {
            load_cases_parallel(&self.data, &m.splits.val, self.workers)?
        };
        Ok((train, val))
    }

    fn log_file(&self) -> Result<std::io::BufWriter<std::fs::File>> {
        let path = self.log.clone().unwrap_or_else(|| {
            let mut n = self.out.file_name().unwrap_or_default().to_os_string();
            n.push(".log.jsonl");
            self.out.with_file_name(n)
        });
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(std::io::BufWriter::new(f))
    }
}

fn gen_phantoms(a: &GenArgs) -> Result<()> {
    let run = Run::start("gen-phantoms", a.config.iter().cloned().collect());
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = &a.shape {
        spec.shape = [s[0], s[1], s[2]];
    }
    if let Some(t) = &a.tumors {
        spec.n_tumors = [t[0], t[1]];
    }
    if let Some(n) = a.noise {
        spec.noise_sigma = n;
    }
    let fractions = [a.split[0], a.split[1], a.split[2]];
    let manifest = phantom::make_dataset(&a.out, a.n, &spec, fractions, a.seed)?;
    let outputs = std::iter::once(a.out.join(phantom::MANIFEST_NAME))
        .chain(manifest.all_cases().flat_map(|id| [phantom::ct_path(&a.out, id), phantom::seg_path(&a.out, id)]))
        .collect();
    log::info!("wrote {} cases to {}", a.n, a.out.display());
    run.finish(to_json(&spec), a.seed, outputs, &a.out.join(RUN_MANIFEST))
}

fn save_model(model: &Model, out: &Path) -> Result<()> {
    model.save(out)?;
    log::info!("saved {} ({} parameters)", out.display(), model.num_trainable());
    Ok(())
}

fn train_stage1_cmd(a: &TrainArgs) -> Result<()> {
    let run = Run::start("train-stage1", vec![a.data.clone()]);
    let cfg = a.config()?;
    let (train, val) = a.cases()?;
    let mut log = a.log_file()?;
    let (model, report) = fit_stage1(&train, &val, &a.encoder(), &cfg, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&a.out, e))?;
    save_model(&model, &a.out)?;
    log::info!("best validation loss {:.5} at epoch {}", report.best_val, report.best_epoch);
    let config = serde_json::json!({ "train": to_json(&cfg), "model": to_json(&model.config) });
    run.finish(config, cfg.seed, vec![a.out.clone()], &manifest_beside(&a.out))
}

fn train_stage2_cmd(a: &TrainStage2Args) -> Result<()> {
    let t = &a.train;
    let run = Run::start("train-stage2", vec![t.data.clone()]);
    let variant = AblationVariant::from(a.variant);
    let mut cfg = t.config()?;
    cfg.edge_target = variant.edge_target();
    if let Some(s) = a.stage2_size {
        cfg.stage2_size = s;
    }
    cfg.validate()?;
    let (train, val) = t.cases()?;
    let mut log = t.log_file()?;
    let net = variant.network(&t.encoder());
    let (model, report) = fit_stage2(&train, &val, &net, &cfg, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&t.out, e))?;
    save_model(&model, &t.out)?;
    log::info!("best validation loss {:.5} at epoch {}", report.best_val, report.best_epoch);
    let config = serde_json::json!({
        "train": to_json(&cfg),
        "model": to_json(&model.config),
        "variant": variant.name(),
    });
    run.finish(config, cfg.seed, vec![t.out.clone()], &manifest_beside(&t.out))
}

fn stage2_size(model: &Model) -> Result<usize> {
    match model.meta.get("stage2_size") {
        Some(s) => s.parse().map_err(|_| Error::Checkpoint(format!("bad stage2_size {s:?} in checkpoint"))),
        None => Ok(InferenceOptions::default().stage2_size),
    }
}

/// Writes through a temporary sibling so that a failure leaves no partial file.
fn save_labels_atomic(l: &LabelVolume, spacing: [f64; 3], path: &Path) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("labels.nii.gz");
    let tmp = path.with_file_name(format!(".partial.{name}"));
    ingest::save_labels(l, spacing, &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let run = Run::start("infer", vec![a.ct.clone(), a.stage1.clone(), a.stage2.clone()]);
    let mut stage1 = Model::load(&a.stage1)?;
    let mut stage2 = Model::load(&a.stage2)?;
    let opts = InferenceOptions {
        threshold: a.threshold,
        largest_component: a.largest_component,
        stage2_size: stage2_size(&stage2)?,
        ..InferenceOptions::default()
    };
    let jobs: Vec<(PathBuf, PathBuf)> = if a.ct.is_dir() {
        let m = Manifest::load(&a.ct)?;
        split_ids(&m, &a.split)?
            .iter()
            .map(|id| (phantom::ct_path(&a.ct, id), a.out.join(format!("{id}_pred.nii.gz"))))
            .collect()
    } else {
        vec![(a.ct.clone(), a.out.clone())]
    };
    // Inputs are validated before anything is written.
    let volumes = jobs.iter().map(|(ct, _)| ingest::load_ct(ct)).collect::<Result<Vec<_>>>()?;
    let mut outputs = Vec::new();
    for (v, (_, out)) in volumes.iter().zip(&jobs) {
        let seg = segment_volume(v, &mut stage1, &mut stage2, &opts)?;
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        save_labels_atomic(&seg.to_labels(), v.spacing, out)?;
        log::info!("{} -> {}", v.case_id, out.display());
        outputs.push(out.clone());
    }
    let at = if a.ct.is_dir() { a.out.join(RUN_MANIFEST) } else { manifest_beside(&a.out) };
    let config = serde_json::json!({ "inference": to_json(&opts), "split": a.split });
    run.finish(config, a.seed, outputs, &at)
}

/// Predicted file for `case_id` in `dir`, trying the usual suffixes.
fn find_prediction(dir: &Path, case_id: &str) -> Option<PathBuf> {
    ["_pred.nii.gz", "_seg.nii.gz", ".nii.gz", "_pred.nii", "_seg.nii", ".nii"]
        .iter()
        .map(|s| dir.join(format!("{case_id}{s}")))
        .find(|p| p.is_file())
}

fn reference_cases(gt: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut refs = Vec::new();
    for entry in std::fs::read_dir(gt).map_err(|e| Error::io(gt, e))? {
        let path = entry.map_err(|e| Error::io(gt, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with("_seg.nii.gz") || name.ends_with("_seg.nii") {
            refs.push((ingest::case_id_from_path(&path), path));
        }
    }
    refs.sort();
    Ok(refs)
}

pub fn summary_text(s: &crate::metrics::Summary) -> String {
    format!(
        "n_cases = {}\nliver_dice_per_case = {:.6}\nliver_global_dice = {:.6}\n\
         tumor_dice_per_case = {:.6}\ntumor_global_dice = {:.6}\ntumor_burden_rmse = {:.6}\n",
        s.n_cases,
        s.liver_dice_per_case,
        s.liver_global_dice,
        s.tumor_dice_per_case,
        s.tumor_global_dice,
        s.tumor_burden_rmse
    )
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let run = Run::start("eval", vec![a.pred.clone(), a.gt.clone()]);
    let refs = reference_cases(&a.gt)?;
    let mut metrics = Vec::new();
    for (id, gt_path) in &refs {
        let Some(pred_path) = find_prediction(&a.pred, id) else {
            log::warn!("no prediction for {id}, skipped");
            continue;
        };
        let truth = ingest::load_labels(gt_path)?;
        let pred = ingest::load_labels(&pred_path)?;
        metrics.push(CaseMetrics::evaluate(&pred, &truth)?);
    }
    if metrics.is_empty() {
        return Err(Error::Validation(format!(
            "no predictions in {} match references in {}",
            a.pred.display(),
            a.gt.display()
        )));
    }
    let summary = summarize(&metrics)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let csv = a.out.join("cases.csv");
    let txt = a.out.join("summary.txt");
    std::fs::write(&csv, cases_csv(&metrics)).map_err(|e| Error::io(&csv, e))?;
    std::fs::write(&txt, summary_text(&summary)).map_err(|e| Error::io(&txt, e))?;
    print!("{}", summary_text(&summary));
    run.finish(to_json(&summary), 0, vec![csv, txt], &a.out.join(RUN_MANIFEST))
}

fn ablation_cmd(a: &AblationArgs) -> Result<()> {
    let t = &a.train;
    let run = Run::start("ablation", vec![t.data.clone(), a.stage1.clone()]);
    let cfg = t.config()?;
    let mut stage1 = Model::load(&a.stage1)?;
    let (train, val) = t.cases()?;
    let m = Manifest::load(&t.data)?;
    let eval_cases = load_cases_parallel(&t.data, split_ids(&m, &a.split)?, t.workers)?;
    if eval_cases.is_empty() {
        return Err(Error::Validation(format!("split {:?} is empty", a.split)));
    }
    let opts = InferenceOptions { stage2_size: cfg.stage2_size, pad: cfg.inference_pad, ..InferenceOptions::default() };
    let rows =
        run_ablation(&slices_of(&train)?, &slices_of(&val)?, &eval_cases, &mut stage1, &t.encoder(), &cfg, &opts)?;
    std::fs::create_dir_all(&t.out).map_err(|e| Error::io(&t.out, e))?;
    let csv = t.out.join("ablation.csv");
    std::fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    print!("{}", ablation_csv(&rows));
    run.finish(to_json(&cfg), cfg.seed, vec![csv], &t.out.join(RUN_MANIFEST))
}

fn overlay_cmd(a: &OverlayArgs) -> Result<()> {
    let mut inputs = vec![a.ct.clone(), a.pred.clone()];
    inputs.extend(a.gt.clone());
    let run = Run::start("render-overlay", inputs);
    let ct = ingest::load_ct(&a.ct)?;
    let pred = ingest::load_labels(&a.pred)?;
    let truth = a.gt.as_deref().map(ingest::load_labels).transpose()?;
    let written = render_overlay(&ct, &pred, truth.as_ref(), &a.out)?;
    log::info!("wrote {} overlays to {}", written.len(), a.out.display());
    run.finish(serde_json::Value::Null, 0, written, &a.out.join(RUN_MANIFEST))
}

fn model_summary(a: &SummaryArgs) -> Result<()> {
    let model = match (&a.checkpoint, a.arch) {
        (Some(p), _) => Model::load(p)?,
        (None, Some(arch)) => {
            let encoder = EncoderConfig { base_width: a.base_width, ..EncoderConfig::default() };
            let config = match arch {
                Arch::R2unet => ModelConfig::R2unet(R2UNetConfig { encoder, out_channels: 1 }),
                Arch::Baseline => ModelConfig::E2net(E2NetConfig { encoder, ..E2NetConfig::baseline() }),
                Arch::TwoBranch => ModelConfig::E2net(E2NetConfig { encoder, ..E2NetConfig::two_branch() }),
                Arch::E2net => ModelConfig::E2net(E2NetConfig { encoder, ..E2NetConfig::default() }),
            };
            Model::new(config, 0)?
        }
        (None, None) => return Err(Error::Validation("pass --checkpoint or --arch".into())),
    };
    let heads = match &model.net {
        crate::model::Network::R2unet(_) => vec!["seg"],
        crate::model::Network::E2net(n) => n.heads(),
    };
    println!("{}", serde_json::to_string_pretty(&model.config).expect("config serializes"));
    println!("heads: {}", heads.join(", "));
    println!("trainable parameters: {}", model.num_trainable());
    for (k, v) in &model.meta {
        println!("meta {k} = {v}");
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenPhantoms(a) => gen_phantoms(a),
        Command::TrainStage1(a) => train_stage1_cmd(a),
        Command::TrainStage2(a) => train_stage2_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
        Command::RenderOverlay(a) => overlay_cmd(a),
        Command::ModelSummary(a) => model_summary(a),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` and runs it. Returns the process exit code: 0 on success,
/// 1 for usage and validation errors, 2 for runtime and I/O failures.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new().parse_filters(&cli.log_level).try_init();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
