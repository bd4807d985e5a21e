//! Mini-batch training, evaluation statistics and run reports.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PairDataset, SplitIndices};
use crate::exec::Exec;
use crate::nn::{self, Gradients, LayerSpec, MlpModel, Mode, NnError};
use crate::numerics::{dot, norm, NORM_EPS};
use crate::objective::{self, AdamConfig, AdamState, ObjectiveError};
use crate::rng::{self, Purpose};

pub const DEFAULT_EPOCHS: usize = 75;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_BINS: usize = 50;
/// Examples per inference batch in validation and evaluation.
const EVAL_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("dimension mismatch: model {model}, dataset {dataset}")]
    DimensionMismatch { model: String, dataset: String },
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("report parse error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub dropout: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            val_frac: crate::data::DEFAULT_VAL_FRAC,
            seed: 0,
            adam: AdamConfig::default(),
            hidden: nn::DEFAULT_HIDDEN.to_vec(),
            dropout: nn::DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn architecture(&self, d_in: usize, d_out: usize) -> Vec<LayerSpec> {
        nn::architecture(d_in, &self.hidden, d_out, self.dropout)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::ConfigInvalid(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad("validation fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        let a = &self.adam;
        if !(a.learning_rate >= 0.0 && a.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("Adam betas must be in [0, 1)");
        }
        if a.epsilon.is_nan() || a.epsilon <= 0.0 {
            return bad("Adam epsilon must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_mean_cosine: Option<f64>,
    /// Kept out of JSON reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochMetrics>,
}

fn positions(pairs: &PairDataset, ids: &[u64]) -> Result<Vec<usize>> {
    ids.iter().map(|&id| pairs.position(id).ok_or(TrainError::UnknownId(id))).collect()
}

fn gather_sources(pairs: &PairDataset, pos: &[usize]) -> Vec<f64> {
    pos.iter().flat_map(|&i| pairs.source(i).iter().map(|&v| v as f64)).collect()
}

fn check_dims(model: &MlpModel, pairs: &PairDataset) -> Result<()> {
    if model.input_dim() != pairs.d_in() || model.output_dim() != pairs.d_out() {
        return Err(TrainError::DimensionMismatch {
            model: format!("{}->{}", model.input_dim(), model.output_dim()),
            dataset: format!("{}->{}", pairs.d_in(), pairs.d_out()),
        });
    }
    Ok(())
}

pub fn train(model: MlpModel, pairs: &PairDataset, split: &SplitIndices, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, pairs, split, cfg, Exec::default(), |_| {})
}

/// Runs `cfg.epochs` epochs over `split.train`, validating on
/// `split.validation` after each one. `on_epoch` sees every epoch's metrics
/// as they are produced.
pub fn train_with(
    mut model: MlpModel,
    pairs: &PairDataset,
    split: &SplitIndices,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dims(&model, pairs)?;
    let mut train_ids = split.train.clone();
    train_ids.sort_unstable();
    let train_pos = positions(pairs, &train_ids)?;
    let val_pos = positions(pairs, &split.validation)?;
    if train_pos.is_empty() {
        return Err(TrainError::ConfigInvalid("training split is empty".into()));
    }
    if cfg.batch_size > train_pos.len() {
        return Err(TrainError::ConfigInvalid(format!(
            "batch size {} exceeds the {} training examples",
            cfg.batch_size,
            train_pos.len()
        )));
    }

    let d_out = model.output_dim();
    let shapes: Vec<usize> = model.param_tensors().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(cfg.adam, &shapes);
    let mut grads = Gradients::zeros_like(&model);
    let mut seen: u64 = 0;
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = train_pos.clone();
        order.shuffle(&mut rng::stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let inputs = gather_sources(pairs, batch);
            let trace = model.forward_batch(&inputs, b, Mode::Train { seed: cfg.seed, step: seen }, exec)?;
            let mut upstream = vec![0.0; b * d_out];
            for (j, &i) in batch.iter().enumerate() {
                let g = &mut upstream[j * d_out..(j + 1) * d_out];
                loss_sum += objective::loss_and_grad_into(pairs.target(i), trace.output_row(j), 1.0 / b as f64, g)?;
            }
            model.backward_batch_into(&trace, &upstream, exec, &mut grads)?;
            let g = grads.tensors();
            adam.step(&mut model.param_tensors_mut(), &g)?;
            seen += b as u64;
        }
        let train_loss = loss_sum / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NumericFailure(format!("training loss is {train_loss} at epoch {}", epoch + 1)));
        }
        let (val_loss, val_mean_cosine) = if val_pos.is_empty() {
            (None, None)
        } else {
            let (l, c) = validation_metrics(&model, pairs, &val_pos, exec)?;
            if !l.is_finite() {
                return Err(TrainError::NumericFailure(format!("validation loss is {l} at epoch {}", epoch + 1)));
            }
            (Some(l), Some(c))
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            val_mean_cosine,
            wall_time: started.elapsed().as_secs_f64(),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(TrainOutcome { model, history })
}

/// Infer-mode predictions for the dataset rows at `pos`, in order.
fn predict_rows(model: &MlpModel, pairs: &PairDataset, pos: &[usize], exec: Exec) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pos.len() * model.output_dim());
    for chunk in pos.chunks(EVAL_BATCH) {
        let inputs = gather_sources(pairs, chunk);
        let mut t = model.forward_batch(&inputs, chunk.len(), Mode::Infer, exec)?;
        out.append(&mut t.layers.pop().unwrap().post);
    }
    Ok(out)
}

/// Mean loss and mean cosine, both summed in `pos` order.
fn validation_metrics(model: &MlpModel, pairs: &PairDataset, pos: &[usize], exec: Exec) -> Result<(f64, f64)> {
    let d = model.output_dim();
    let preds = predict_rows(model, pairs, pos, exec)?;
    let (mut loss, mut cos) = (0.0, 0.0);
    for (j, &i) in pos.iter().enumerate() {
        let p = &preds[j * d..(j + 1) * d];
        loss += objective::loss_slices(pairs.target(i), p)?;
        cos += guarded_cosine(pairs.target(i), p)?;
    }
    let n = pos.len() as f64;
    Ok((loss / n, cos / n))
}

/// Unscaled cosine with the prediction norm floored at `NORM_EPS`.
fn guarded_cosine(target: &[f32], pred: &[f64]) -> Result<f64> {
    let nt = norm(target);
    if nt < NORM_EPS {
        return Err(ObjectiveError::from(crate::numerics::NumericsError::ZeroNorm).into());
    }
    let np = norm(pred).max(NORM_EPS);
    Ok((dot(target, pred) / (nt * np)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Vec<HistogramBin>,
}

impl CosStats {
    /// Statistics of `values` with `bins` uniform bins over `[-1, 1]`; the
    /// last bin is closed on the right.
    pub fn from_values(values: &[f64], bins: usize) -> Option<Self> {
        if values.is_empty() || bins == 0 {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = 2.0 / bins as f64;
        let mut histogram: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin { lower: -1.0 + i as f64 * width, upper: -1.0 + (i + 1) as f64 * width, count: 0 })
            .collect();
        histogram[bins - 1].upper = 1.0;
        for v in values {
            let k = (((v + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
            histogram[k].count += 1;
        }
        Some(Self { n: values.len(), mean, std, min, max, histogram })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdCosine {
    pub id: u64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub stats: CosStats,
    pub cosines: Vec<IdCosine>,
}

pub fn evaluate(model: &MlpModel, pairs: &PairDataset, ids: &[u64]) -> Result<Evaluation> {
    evaluate_with(model, pairs, ids, DEFAULT_BINS, Exec::default())
}

/// Cosine between each target and its infer-mode prediction, in `ids` order.
pub fn evaluate_with(
    model: &MlpModel,
    pairs: &PairDataset,
    ids: &[u64],
    bins: usize,
    exec: Exec,
) -> Result<Evaluation> {
    check_dims(model, pairs)?;
    if ids.is_empty() {
        return Err(TrainError::ConfigInvalid("no ids to evaluate".into()));
    }
    let pos = positions(pairs, ids)?;
    let d = model.output_dim();
    let preds = predict_rows(model, pairs, &pos, exec)?;
    let cosines = pos
        .iter()
        .zip(ids)
        .enumerate()
        .map(|(j, (&i, &id))| Ok(IdCosine { id, cosine: guarded_cosine(pairs.target(i), &preds[j * d..(j + 1) * d])? }))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = cosines.iter().map(|c| c.cosine).collect();
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(TrainError::NumericFailure(format!("cosine evaluated to {bad}")));
    }
    let stats = CosStats::from_values(&values, bins).expect("nonempty");
    Ok(Evaluation { stats, cosines })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputChecksum {
    pub name: String,
    pub bytes: u64,
    /// CRC-64/XZ, lowercase hex.
    pub crc64: String,
}

impl InputChecksum {
    pub fn of(name: &str, contents: &[u8]) -> Self {
        Self {
            name: name.to_string(),
            bytes: contents.len() as u64,
            crc64: format!("{:016x}", crate::format::crc64(contents)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: String,
    pub rng: String,
    pub split_seed: u64,
    pub config: Option<TrainConfig>,
    pub architecture: Vec<LayerSpec>,
    pub output_dim: usize,
    pub inputs: Vec<InputChecksum>,
    pub epochs: Vec<EpochMetrics>,
    pub evaluated: Option<String>,
    pub stats: Option<CosStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cosines: Vec<IdCosine>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })?;
        Self::from_json(&s)
    }
}

pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    crate::atomic_write(path, report.to_json()?.as_bytes())
        .map_err(|e| TrainError::Io { path: path.display().to_string(), source: e })
}

/// `epoch,train_loss,val_loss,seconds` rows for plotting.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
    for m in history {
        let val = m.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{:.3}\n", m.epoch, m.train_loss, val, m.wall_time));
    }
    s
}
