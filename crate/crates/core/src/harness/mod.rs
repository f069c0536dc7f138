//! Run configuration, training loop, checkpoints and the experiment drivers
//! behind the command-line tool.

mod commands;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParameterStore, Tensor};
use crate::enforce::{ConstraintSpec, EnforceError};
use crate::features::{EncodedSession, FeatureError, FeatureSchema, Mode, DEFAULT_MAX_LEN};
use crate::loss::{loss_on_graph, LossError, LossReport, Targets};
use crate::metrics::MetricsError;
use crate::models::{pretrain_port_embedder, Arch, ModelConfig, ModelError, PortEmbedder, PretrainConfig, SessionAutoencoder};
use crate::pcap::{read_pcap, PcapError, SkipCounts};
use crate::session::{group_sessions, split_sessions, Session, SplitError};
use crate::synth::SynthError;

pub use commands::{
    cmd_compare_models, cmd_dropout_experiment, cmd_evaluate, cmd_fit_schema, cmd_ingest, cmd_loss_ablation,
    cmd_reconstruct, cmd_synth, cmd_train, write_manifest, PACKET_LEVEL, SESSION_LEVEL, AblationReport, CompareReport, DropoutReport, DropoutRun,
    EvaluateReport, IngestReport, ReconstructReport, SynthReport, TrainReport,
};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    Config(String),
    #[error("capture holds no TCP sessions")]
    NoSessions,
    #[error("training diverged: loss is not finite at epoch {0}")]
    Diverged(usize),
    #[error("checkpoint does not fit: {0}")]
    CheckpointMismatch(String),
    #[error(transparent)]
    Pcap(#[from] PcapError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Enforce(#[from] EnforceError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("cannot parse run config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub mode: Mode,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Defaults per architecture when unset.
    pub batch_size: Option<usize>,
    pub max_len: usize,
    /// Model seeds for repeated experiments.
    pub seeds: Vec<u64>,
    pub dropout_rates: Vec<f64>,
    pub disabled_rules: Vec<String>,
    pub model: ModelConfig,
    pub embedder: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            output_dir: PathBuf::from("runs/default"),
            mode: Mode::Kal,
            train_fraction: 0.8,
            split_seed: 0,
            lr: 0.001,
            weight_decay: 1e-5,
            patience: 100,
            max_epochs: 500,
            batch_size: None,
            max_len: DEFAULT_MAX_LEN,
            seeds: vec![0, 1, 2],
            dropout_rates: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            disabled_rules: Vec::new(),
            model: ModelConfig { arch: Arch::Transformer, ..ModelConfig::default() },
            embedder: PretrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let cfg: RunConfig = toml::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is plain data")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} not in (0, 1)", self.train_fraction));
        }
        if let Some(r) = self.dropout_rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("dropout rate {r} not in [0, 1]"));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        if self.batch_size == Some(0) {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        self.model.validate()?;
        ConstraintSpec::without(&self.disabled_rules)?;
        Ok(())
    }

    pub fn batch_size_for(&self, arch: Arch) -> usize {
        self.batch_size.unwrap_or_else(|| arch.default_batch_size())
    }

    pub fn constraint_spec(&self) -> Result<ConstraintSpec, HarnessError> {
        Ok(ConstraintSpec::without(&self.disabled_rules)?)
    }

    pub fn train_options(&self, arch: Arch) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            weight_decay: self.weight_decay,
            patience: self.patience,
            max_epochs: self.max_epochs,
            batch_size: self.batch_size_for(arch),
        }
    }

    fn input(&self) -> Result<&Path, HarnessError> {
        self.input.as_deref().ok_or_else(|| HarnessError::Config("no input capture given".into()))
    }
}

/// Reads a capture and assembles its sessions.
pub fn ingest(path: impl AsRef<Path>) -> Result<(Vec<Session>, usize, SkipCounts), HarnessError> {
    let capture = read_pcap(path)?;
    let sessions = group_sessions(&capture.packets);
    if sessions.is_empty() {
        return Err(HarnessError::NoSessions);
    }
    Ok((sessions, capture.packets.len(), capture.skipped))
}

/// Split, fitted schema, port embeddings and encodings for one mode.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Session>,
    pub val: Vec<Session>,
    pub schema: FeatureSchema,
    pub embedder: Option<PortEmbedder>,
    pub enc_train: Vec<EncodedSession>,
    pub enc_val: Vec<EncodedSession>,
    pub max_len: usize,
}

impl Dataset {
    pub fn build(sessions: &[Session], mode: Mode, cfg: &RunConfig) -> Result<Self, HarnessError> {
        let (train, val) = split_sessions(sessions, cfg.train_fraction, cfg.split_seed)?;
        let schema = FeatureSchema::fit(&train, mode)?;
        let embedder = match schema.embed_dim() {
            Some(d) => {
                let pc = PretrainConfig { embed_dim: d, ..cfg.embedder.clone() };
                Some(pretrain_port_embedder(schema.port_vocabulary.len(), &pc)?)
            }
            None => None,
        };
        let enc_train = schema.encode_sessions(&train, cfg.max_len);
        let enc_val = schema.encode_sessions(&val, cfg.max_len);
        Ok(Self { train, val, schema, embedder, enc_train, enc_val, max_len: cfg.max_len })
    }

    pub fn table(&self) -> Option<&Tensor> {
        self.embedder.as_ref().map(|e| &e.table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_val_loss: f64,
    pub train_categorical: f64,
    pub val_categorical: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best validation epoch.
    pub model: SessionAutoencoder,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: LossReport,
}

fn eval_rng(model: &SessionAutoencoder) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x00e7_a1e7_a1e7_a1e7)
}

/// Loss of `model` over `sessions` in evaluation mode. Missing-data dropout
/// (when configured) draws from a generator fixed by the model seed, so the
/// value is reproducible.
pub fn loss_on(
    model: &SessionAutoencoder,
    schema: &FeatureSchema,
    table: Option<&Tensor>,
    sessions: &[EncodedSession],
    batch_size: usize,
) -> Result<LossReport, HarnessError> {
    let mut rng = eval_rng(model);
    let mut reports = Vec::new();
    for chunk in sessions.chunks(batch_size.max(1)) {
        let refs: Vec<&EncodedSession> = chunk.iter().collect();
        let batch = model.build_batch(&refs, table, Some(&mut rng), false)?;
        let targets = Targets::new(schema, &refs, batch.len, table)?;
        let mut g = Graph::new();
        let y = model.forward(&mut g, &batch)?;
        let lg = loss_on_graph(&mut g, schema, y, model.activation(), &targets)?;
        reports.push(LossReport::from_graph(&g, schema, &lg));
    }
    LossReport::combine(&reports).ok_or(HarnessError::Loss(LossError::EmptyMask))
}

/// Predictions matching [`loss_on`]'s dropout draws.
pub fn predict_eval(
    model: &SessionAutoencoder,
    table: Option<&Tensor>,
    sessions: &[EncodedSession],
    batch_size: usize,
) -> Result<Vec<crate::features::ModelOutputs>, HarnessError> {
    let mut rng = eval_rng(model);
    Ok(model.predict_sessions(sessions, table, batch_size, Some(&mut rng as &mut dyn RngCore))?)
}

/// Adam on shuffled mini-batches with early stopping on validation loss.
pub fn train_model(
    config: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, HarnessError> {
    let mut model = SessionAutoencoder::new(config.clone(), &data.schema)?;
    let table = data.table();
    let schema = &data.schema;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut order: Vec<usize> = (0..data.enc_train.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(usize, LossReport, ParameterStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let refs: Vec<&EncodedSession> = chunk.iter().map(|&i| &data.enc_train[i]).collect();
            let batch = model.build_batch(&refs, table, Some(&mut rng), true)?;
            let targets = Targets::new(schema, &refs, batch.len, table)?;
            let mut g = Graph::new();
            let y = model.forward(&mut g, &batch)?;
            let lg = loss_on_graph(&mut g, schema, y, model.activation(), &targets)?;
            let report = LossReport::from_graph(&g, schema, &lg);
            if !report.total.is_finite() {
                return Err(HarnessError::Diverged(epoch));
            }
            reports.push(report);
            let grads = g.backward(lg.total)?;
            model.store.adam_step(&grads, opts.lr, opts.weight_decay)?;
        }
        let train = LossReport::combine(&reports).ok_or(HarnessError::Loss(LossError::EmptyMask))?;
        let val = loss_on(&model, schema, table, &data.enc_val, opts.batch_size)?;
        let improved = best.as_ref().is_none_or(|(_, b, _)| val.total < b.total);
        if improved {
            best = Some((epoch, val.clone(), model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: train.total,
            val_loss: val.total,
            best_val_loss: best.as_ref().map_or(f64::NAN, |b| b.1.total),
            train_categorical: train.categorical_mean(),
            val_categorical: val.categorical_mean(),
        };
        log::debug!("epoch {epoch}: train {:.6} val {:.6}", record.train_loss, record.val_loss);
        on_epoch(&record);
        history.push(record);
        if since_best >= opts.patience {
            break;
        }
    }
    let (best_epoch, best_val, store) = best.ok_or(HarnessError::Config("max_epochs must be at least 1".into()))?;
    if !best_val.total.is_finite() {
        return Err(HarnessError::Diverged(best_epoch));
    }
    model.store = store;
    Ok(TrainOutcome { model, history, best_epoch, best_val, })
}

/// Everything needed to rebuild a trained model and its input pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub model: ModelConfig,
    pub schema: FeatureSchema,
    pub embeddings: Option<Tensor>,
    pub params: ParameterStore,
    pub max_len: usize,
    pub batch_size: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl Checkpoint {
    pub fn new(outcome: &TrainOutcome, data: &Dataset, batch_size: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT,
            model: outcome.model.config.clone(),
            schema: data.schema.clone(),
            embeddings: data.table().cloned(),
            params: outcome.model.store.clone(),
            max_len: data.max_len,
            batch_size,
            best_epoch: outcome.best_epoch,
            best_val_loss: outcome.best_val.total,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(HarnessError::CheckpointMismatch(format!("format {} unsupported", ck.format)));
        }
        ck.schema.validate()?;
        Ok(ck)
    }

    /// Rebuilds the model and loads the stored weights.
    pub fn restore(&self) -> Result<SessionAutoencoder, HarnessError> {
        let mut model = SessionAutoencoder::new(self.model.clone(), &self.schema)?;
        if model.store.len() != self.params.len() {
            return Err(HarnessError::CheckpointMismatch(format!(
                "{} stored tensors, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        model.store.load_values_from(&self.params)?;
        Ok(model)
    }
}
