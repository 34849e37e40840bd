//! The training and evaluation protocol.
//!
//! A run trains for a fixed number of optimizer steps, cycling (and
//! reshuffling) epochs as needed. Every `log_every` steps it records
//! accuracy and loss on the current training batch, using the forward pass
//! that feeds that step's update. Randomness comes from three streams
//! derived from the run seed: weight init, batch order and dropout masks.
//! None of them depend on the head, so two runs that differ only in the head
//! start from the same weights and see the same batches.

mod metrics;
mod persist;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{batches, load_split, pad_images, DatasetName, DatasetSplit, PixelScale, SplitKind, StepSampler};
use crate::error::{Error, Result};
use crate::layers::{Mode, Padding};
use crate::model::{cnn_backward, cnn_forward, cnn_scores, ArchConfig, ModelParams};
use crate::objectives::{accuracy, predict, HeadKind, LossHead};
use crate::optim::{adam_init, adam_step, AdamConfig};
use crate::rng::Rng;

pub use metrics::{
    format_metric, read_metrics_csv, render_curves_svg, write_metrics, MetricRecord, MetricsFiles, RunSummary,
    CSV_HEADER,
};
pub use persist::{load_model, save_model, SavedModel, MODEL_MAGIC, MODEL_VERSION};

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: DatasetName,
    pub head: HeadKind,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub steps: u64,
    pub svm_c: f64,
    pub seed: u64,
    pub input_extent: usize,
    pub pool_stride: usize,
    pub log_every: u64,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub raw_pixels: bool,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden_units: usize,
    /// Train on the first `n` training samples only.
    pub train_limit: Option<usize>,
    pub eval_batch_size: usize,
    /// Fill `wall_ms`; off by default so metric files are reproducible.
    pub record_wall_time: bool,
    pub plot: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetName::Mnist,
            head: HeadKind::L2Svm,
            batch_size: 128,
            dropout_p: 0.5,
            learning_rate: 1e-3,
            steps: 10_000,
            svm_c: 1.0,
            seed: 1,
            input_extent: 28,
            pool_stride: 2,
            log_every: 100,
            out_dir: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            raw_pixels: false,
            conv1_filters: 32,
            conv2_filters: 64,
            hidden_units: 1024,
            train_limit: None,
            eval_batch_size: 500,
            record_wall_time: false,
            plot: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size must be >= 1".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be >= 1".into());
        }
        if !matches!(self.input_extent, 28 | 32) {
            return bad(format!("input_extent must be 28 or 32, got {}", self.input_extent));
        }
        if !matches!(self.pool_stride, 1 | 2) {
            return bad(format!("pool_stride must be 1 or 2, got {}", self.pool_stride));
        }
        if self.train_limit == Some(0) {
            return bad("train_limit must be >= 1".into());
        }
        self.arch().validate()?;
        self.loss_head().validate()?;
        self.adam().validate()
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            input_extent: self.input_extent,
            conv1_filters: self.conv1_filters,
            conv2_filters: self.conv2_filters,
            hidden_units: self.hidden_units,
            pool_stride: self.pool_stride,
            padding: Padding::Same,
            dropout_p: self.dropout_p,
            ..ArchConfig::default()
        }
    }

    pub fn loss_head(&self) -> LossHead {
        LossHead { kind: self.head, penalty: self.svm_c, reg_coeff: None }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }

    pub fn pixel_scale(&self) -> PixelScale {
        if self.raw_pixels {
            PixelScale::Raw
        } else {
            PixelScale::Unit
        }
    }

    /// Loads a split of the configured dataset, padded to `input_extent`.
    pub fn load(&self, kind: SplitKind) -> Result<DatasetSplit> {
        let split = load_split(&self.data_dir, self.dataset, kind, self.pixel_scale())?;
        pad_images(&split, self.input_extent)
    }
}

/// Field names accepted by [`TrainConfig::set`]; `-` may replace `_`.
pub const CONFIG_KEYS: [&str; 21] = [
    "dataset",
    "head",
    "batch_size",
    "dropout_p",
    "learning_rate",
    "steps",
    "svm_c",
    "seed",
    "input_extent",
    "pool_stride",
    "log_every",
    "out_dir",
    "data_dir",
    "raw_pixels",
    "conv1_filters",
    "conv2_filters",
    "hidden_units",
    "train_limit",
    "eval_batch_size",
    "record_wall_time",
    "plot",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one field from its textual form. Values are not range-checked
    /// here; see [`TrainConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_").to_ascii_lowercase();
        let value = value.trim();
        match key.as_str() {
            "dataset" => self.dataset = parse_value(&key, value)?,
            "head" => self.head = parse_value(&key, value)?,
            "batch_size" => self.batch_size = parse_value(&key, value)?,
            "dropout_p" => self.dropout_p = parse_value(&key, value)?,
            "learning_rate" => self.learning_rate = parse_value(&key, value)?,
            "steps" => self.steps = parse_value(&key, value)?,
            "svm_c" => self.svm_c = parse_value(&key, value)?,
            "seed" => self.seed = parse_value(&key, value)?,
            "input_extent" => self.input_extent = parse_value(&key, value)?,
            "pool_stride" => self.pool_stride = parse_value(&key, value)?,
            "log_every" => self.log_every = parse_value(&key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "raw_pixels" => self.raw_pixels = parse_value(&key, value)?,
            "conv1_filters" => self.conv1_filters = parse_value(&key, value)?,
            "conv2_filters" => self.conv2_filters = parse_value(&key, value)?,
            "hidden_units" => self.hidden_units = parse_value(&key, value)?,
            "train_limit" => {
                self.train_limit = match value {
                    "" | "none" => None,
                    v => Some(parse_value(&key, v)?),
                }
            }
            "eval_batch_size" => self.eval_batch_size = parse_value(&key, value)?,
            "record_wall_time" => self.record_wall_time = parse_value(&key, value)?,
            "plot" => self.plot = parse_value(&key, value)?,
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }
}

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// ignored.
pub fn parse_settings(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| (i, line.trim()))
        .filter(|(_, line)| !line.is_empty() && !line.starts_with('#'))
        .map(|(i, line)| {
            line.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub records: Vec<MetricRecord>,
    /// Number of optimizer updates applied.
    pub optimizer_steps: u64,
}

/// Initial weights of a run; shared by every head for a given seed.
pub fn initial_model(cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(cfg.arch(), &mut Rng::stream(cfg.seed, STREAM_INIT))
}

/// Trains on `split` for exactly `cfg.steps` optimizer steps.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome> {
    train_with(cfg, split, |_, _| {})
}

/// As [`train`], calling `on_record` for every metric record as it is made.
pub fn train_with(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    mut on_record: impl FnMut(&MetricRecord, &TrainConfig),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.extent() != cfg.input_extent {
        return Err(Error::Config(format!(
            "training images are {0}x{0}, configured input extent is {1}",
            split.extent(),
            cfg.input_extent
        )));
    }
    let mut model = initial_model(cfg)?;
    let head = cfg.loss_head();
    let adam = cfg.adam();
    let mut state = adam_init(&model);
    let mut sampler = StepSampler::new(split, cfg.batch_size, true, Rng::stream(cfg.seed, STREAM_SHUFFLE))?;
    let mut dropout_rng = Rng::stream(cfg.seed, STREAM_DROPOUT);
    let started = Instant::now();
    let mut records = Vec::new();

    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let (scores, cache) = cnn_forward(&batch.x, &model, Mode::Train, &mut dropout_rng)?;
        let out = head.evaluate(&scores, &batch.labels, &model.fc2.weight)?;
        if !out.loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if step % cfg.log_every == 0 {
            let train_accuracy = accuracy(&predict(&scores)?, &batch.labels)?;
            let wall_ms = if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 };
            let record = MetricRecord::new(step, train_accuracy, out.loss, wall_ms);
            on_record(&record, cfg);
            records.push(record);
        }
        let mut grads = cnn_backward(&out.grad_scores, cache, &model)?;
        if let Some(reg) = &out.grad_head_weight {
            grads.fc2_weight = grads.fc2_weight.add(reg)?;
        }
        adam_step(&mut model, &grads, &mut state, &adam)?;
    }

    Ok(TrainOutcome { model, records, optimizer_steps: state.step() })
}

/// Loads the configured training split (limited to `train_limit` samples)
/// and trains on it.
pub fn run_train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut split = cfg.load(SplitKind::Train)?;
    if let Some(limit) = cfg.train_limit {
        split = split.take(limit)?;
    }
    train(cfg, &split)
}

/// Eval-mode accuracy over the whole split, in order. The result does not
/// depend on `batch_size`.
pub fn evaluate(model: &ModelParams, split: &DatasetSplit, batch_size: usize) -> Result<f64> {
    let batch_size = batch_size.clamp(1, split.len().max(1));
    let mut predictions = Vec::with_capacity(split.len());
    for batch in batches(split, batch_size, false, &mut Rng::new(0))? {
        predictions.extend(predict(&cnn_scores(&batch.x, model)?)?);
    }
    accuracy(&predictions, split.labels())
}
