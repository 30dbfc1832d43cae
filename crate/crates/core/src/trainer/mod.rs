//! Two-stage training: sampling and cropping policies, the loss objective,
//! SGD with the plateau schedule, and the ablation runner.

mod ablation;
mod crop;
mod data;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::e2net::E2NetConfig;
use crate::engine::{Graph, Mode, ParamStore, Sgd, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{map_loss_logits, LossValue, EDGE_WEIGHT};
use crate::model::{Logits, Model, ModelConfig};
use crate::nn::{EncoderConfig, R2UNetConfig};

pub use ablation::{ablation_csv, run_ablation, AblationRow, AblationVariant};
pub use crop::{crop_liver_region, CropSpec, LiverSource};
pub use data::{
    balanced_order, load_case, load_cases, random_square_crop, sample_stage1_batch, slices_of, stage2_example, Batch,
    Case, Example, Stage, TrainingSet, PAD_VALUE,
};

/// How the edge head is supervised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTarget {
    /// Edge distance maps (soft, peaked at the boundary).
    #[default]
    Distance,
    /// Binary 4-connected edge images.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs without an improvement larger than `min_delta` before the
    /// learning rate is divided.
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub decay_factor: f64,
    pub max_decays: usize,
    /// Hard cap on epochs, applied on top of the plateau rule.
    pub max_epochs: usize,
    pub stage1_crop: usize,
    pub stage2_size: usize,
    /// Inclusive range the per-sample liver-box padding is drawn from.
    pub pad_range: [usize; 2],
    /// Fixed liver-box padding for validation and inference.
    pub inference_pad: usize,
    /// Training samples per epoch; defaults to one pass over the pool.
    pub samples_per_epoch: Option<usize>,
    /// Evenly spaced subset of validation samples; defaults to all.
    pub val_samples: Option<usize>,
    pub edge_target: EdgeTarget,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            batch_size: 8,
            plateau_patience: 3,
            min_delta: 1e-4,
            decay_factor: 10.0,
            max_decays: 2,
            max_epochs: 100,
            stage1_crop: 96,
            stage2_size: 96,
            pad_range: [10, 60],
            inference_pad: 35,
            samples_per_epoch: None,
            val_samples: None,
            edge_target: EdgeTarget::Distance,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be positive".into());
        }
        if self.decay_factor <= 1.0 {
            return fail("decay_factor must exceed 1".into());
        }
        for (name, v) in [("stage1_crop", self.stage1_crop), ("stage2_size", self.stage2_size)] {
            if v == 0 || v % 32 != 0 {
                return fail(format!("{name} must be a positive multiple of 32, got {v}"));
            }
        }
        if self.pad_range[0] > self.pad_range[1] {
            return fail("pad_range is reversed".into());
        }
        if self.samples_per_epoch == Some(0) || self.val_samples == Some(0) {
            return fail("sample budgets must be positive".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlateauEvent {
    Improved,
    Stalled,
    Decayed,
    Stop,
}

/// Divides the learning rate when validation loss stops improving and
/// stops once the final decay has plateaued as well.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub decays: usize,
    stale: usize,
    patience: usize,
    min_delta: f64,
    factor: f64,
    max_decays: usize,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            lr: cfg.lr0,
            best: f64::INFINITY,
            decays: 0,
            stale: 0,
            patience: cfg.plateau_patience.max(1),
            min_delta: cfg.min_delta,
            factor: cfg.decay_factor,
            max_decays: cfg.max_decays,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauEvent {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stale = 0;
            return PlateauEvent::Improved;
        }
        self.stale += 1;
        if self.stale < self.patience {
            return PlateauEvent::Stalled;
        }
        if self.decays >= self.max_decays {
            return PlateauEvent::Stop;
        }
        self.stale = 0;
        self.decays += 1;
        self.lr /= self.factor;
        PlateauEvent::Decayed
    }
}

/// Loss and logit gradients of one batch.
pub struct BatchLoss {
    pub value: LossValue,
    pub seeds: Vec<(Var, Tensor)>,
}

/// Stage objective over a batch. Per-sample losses are averaged over the
/// batch; multi-channel terms are averaged over channels.
///
/// Stage 1 (single channel, single head) reports `{iou, bce}`; otherwise the
/// second-stage components `iou_s1, bce_s1, iou_s2, bce_s2, bce_edge` are
/// reported for the heads present.
pub fn batch_loss(g: &Graph, logits: &Logits, batch: &Batch) -> Result<BatchLoss> {
    let masks = &batch.masks;
    let [n, k, _, _] = masks.shape();
    let stage1 = k == 1 && logits.e.is_none() && logits.s2.is_none();
    let scale = 1.0 / (n * k) as f64;

    let seg_terms = |v: Var| -> Result<(f64, f64, Tensor)> {
        let t = g.value(v);
        if t.shape() != masks.shape() {
            return Err(Error::Validation(format!("logits {:?} do not match targets {:?}", t.shape(), masks.shape())));
        }
        let (mut iou, mut bce) = (0.0, 0.0);
        let mut grad = Tensor::zeros(t.shape());
        for s in 0..n {
            for c in 0..k {
                let ml = map_loss_logits(masks.channel(s, c), t.channel(s, c), 1.0, 1.0)?;
                iou += ml.iou * scale;
                bce += ml.bce * scale;
                for (o, gv) in grad.channel_mut(s, c).iter_mut().zip(&ml.grad) {
                    *o = gv * scale as f32;
                }
            }
        }
        Ok((iou, bce, grad))
    };

    let mut terms: Vec<(&str, f64, f64)> = Vec::new();
    let mut seeds = Vec::new();
    let (iou1, bce1, g1) = seg_terms(logits.s1)?;
    seeds.push((logits.s1, g1));
    if stage1 {
        terms.push(("iou", 1.0, iou1));
        terms.push(("bce", 1.0, bce1));
    } else {
        terms.push(("iou_s1", 1.0, iou1));
        terms.push(("bce_s1", 1.0, bce1));
    }
    if let Some(s2) = logits.s2 {
        let (iou2, bce2, g2) = seg_terms(s2)?;
        terms.push(("iou_s2", 1.0, iou2));
        terms.push(("bce_s2", 1.0, bce2));
        seeds.push((s2, g2));
    }
    if let Some(e) = logits.e {
        let edges = batch
            .edges
            .as_ref()
            .ok_or_else(|| Error::Validation("edge head present but batch has no edge targets".into()))?;
        let t = g.value(e);
        let mut bce = 0.0;
        let mut grad = Tensor::zeros(t.shape());
        for s in 0..n {
            for c in 0..k {
                let ml = map_loss_logits(edges.channel(s, c), t.channel(s, c), 0.0, EDGE_WEIGHT)?;
                bce += ml.bce * scale;
                for (o, gv) in grad.channel_mut(s, c).iter_mut().zip(&ml.grad) {
                    *o = gv * scale as f32;
                }
            }
        }
        terms.push(("bce_edge", EDGE_WEIGHT, bce));
        seeds.push((e, grad));
    }
    Ok(BatchLoss { value: LossValue::weighted(&terms), seeds })
}

/// Mean loss over `examples` in inference mode.
pub fn evaluate_loss(model: &mut Model, examples: &[Example], batch_size: usize) -> Result<LossValue> {
    let mut parts = Vec::new();
    let mut weights = Vec::new();
    for chunk in examples.chunks(batch_size.max(1)) {
        let batch = Batch::collate(chunk)?;
        let mut g = Graph::new(&mut model.store, Mode::Eval);
        let x = g.input(batch.images.clone());
        let logits = Model::forward(&model.net, &mut g, x)?;
        parts.push(batch_loss(&g, &logits, &batch)?.value);
        weights.push(chunk.len() as f64);
    }
    let total: f64 = weights.iter().sum();
    let mut out = LossValue::default();
    for (v, w) in parts.iter().zip(&weights) {
        out.total += v.total * w / total;
        for (k, c) in &v.components {
            *out.components.entry(k.clone()).or_insert(0.0) += c * w / total;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossValue,
    pub val: LossValue,
    pub event: PlateauEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Learning rates in the order they were used.
    pub lr_history: Vec<f64>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    epoch: usize,
    split: &'a str,
    lr: f64,
    total: f64,
    components: &'a std::collections::BTreeMap<String, f64>,
}

fn write_log(log: &mut Option<&mut dyn Write>, rec: &EpochRecord) -> Result<()> {
    let Some(w) = log.as_mut() else { return Ok(()) };
    for (split, v) in [("train", &rec.train), ("val", &rec.val)] {
        let line = serde_json::to_string(&LogLine {
            epoch: rec.epoch,
            split,
            lr: rec.lr,
            total: v.total,
            components: &v.components,
        })
        .map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(Path::new("<training log>"), e))?;
    }
    Ok(())
}

/// Trains `model` on `train` with SGD and the plateau schedule, keeping the
/// parameters of the best validation epoch. Bit-reproducible for a fixed
/// seed.
pub fn train_stage(
    model: &mut Model,
    train: &TrainingSet,
    val: &[Example],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Validation("validation set is empty".into()));
    }
    let mut plateau = Plateau::new(cfg);
    let mut sgd = Sgd::new(cfg.lr0 as f32, cfg.momentum as f32);
    let mut best: Option<ParamStore> = None;
    let mut report =
        TrainReport { epochs: Vec::new(), best_epoch: 0, best_val: f64::INFINITY, lr_history: vec![cfg.lr0] };
    for epoch in 1..=cfg.max_epochs {
        let lr = plateau.lr;
        sgd.lr = lr as f32;
        let examples = train.epoch_examples(epoch as u64, cfg)?;
        let mut batch_values = Vec::new();
        for (step, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::collate(chunk)?;
            let mut g = Graph::new(&mut model.store, Mode::Train);
            let x = g.input(batch.images.clone());
            let logits = Model::forward(&model.net, &mut g, x)?;
            let loss = batch_loss(&g, &logits, &batch)?;
            if !loss.value.total.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            let grads = g.backward(loss.seeds);
            drop(g);
            if grads.values().any(|t| !t.all_finite()) {
                return Err(Error::Divergence { epoch, step });
            }
            sgd.step(&mut model.store, &grads);
            batch_values.push(loss.value);
        }
        let train_loss = LossValue::mean(&batch_values);
        let val_loss = evaluate_loss(model, val, cfg.batch_size)?;
        if !val_loss.total.is_finite() {
            return Err(Error::Divergence { epoch, step: batch_values.len() });
        }
        let event = plateau.observe(val_loss.total);
        if event == PlateauEvent::Improved {
            best = Some(model.store.clone());
            report.best_epoch = epoch;
            report.best_val = val_loss.total;
        }
        let rec = EpochRecord { epoch, lr, train: train_loss, val: val_loss, event };
        write_log(&mut log, &rec)?;
        log::info!("epoch {epoch} lr {lr:.0e} train {:.4} val {:.4} {:?}", rec.train.total, rec.val.total, event);
        report.epochs.push(rec);
        match event {
            PlateauEvent::Stop => break,
            PlateauEvent::Decayed => report.lr_history.push(plateau.lr),
            _ => {}
        }
    }
    if let Some(store) = best {
        model.store = store;
    }
    Ok(report)
}

/// Builds, trains and returns a stage-1 liver network (R2UNet, one channel).
pub fn fit_stage1(
    train: &[Case],
    val: &[Case],
    encoder: &EncoderConfig,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model, TrainReport)> {
    let set = TrainingSet::new(Stage::One, slices_of(train)?)?;
    let val = TrainingSet::validation_examples(Stage::One, &slices_of(val)?, cfg)?;
    let config = ModelConfig::R2unet(R2UNetConfig { encoder: encoder.clone(), out_channels: 1 });
    let mut model = Model::new(config, cfg.seed)?;
    model.meta.insert("stage".into(), "1".into());
    let report = train_stage(&mut model, &set, &val, cfg, log)?;
    Ok((model, report))
}

/// Builds, trains and returns a stage-2 network on ground-truth liver crops.
pub fn fit_stage2(
    train: &[Case],
    val: &[Case],
    net: &E2NetConfig,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model, TrainReport)> {
    if net.out_channels != 2 {
        return Err(Error::Config("the second stage predicts two channels (liver, tumor)".into()));
    }
    let set = TrainingSet::new(Stage::Two, slices_of(train)?)?;
    let val = TrainingSet::validation_examples(Stage::Two, &slices_of(val)?, cfg)?;
    let mut model = Model::new(ModelConfig::E2net(net.clone()), cfg.seed)?;
    model.meta.insert("stage".into(), "2".into());
    model.meta.insert("stage2_size".into(), cfg.stage2_size.to_string());
    let report = train_stage(&mut model, &set, &val, cfg, log)?;
    Ok((model, report))
}
