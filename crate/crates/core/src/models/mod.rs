//! Session autoencoders (feedforward, GRU, LSTM, BiLSTM, attention,
//! transformer) and the port embedding pre-trainer.

mod embedder;
mod layers;

use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParameterStore, Tensor, Var};
use crate::features::{EncodedSession, FeatureKind, FeatureSchema, Mode, ModelOutputs, OutputActivation};
use layers::{positional_encoding, GruLayer, Linear, LstmLayer, SelfAttention, Steps, TransformerBlock};

pub use embedder::{pretrain_port_embedder, PortEmbedder, PretrainConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvariantViolation(String),
    #[error("expected width {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("port vocabulary is empty")]
    EmptyVocabulary,
    #[error("batch has no sessions")]
    EmptyBatch,
    #[error("schema has embedded features but no embedding table was given")]
    MissingEmbeddings,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Feedforward,
    Gru,
    Lstm,
    #[serde(rename = "bilstm")]
    BiLstm,
    Attention,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 6] = [Arch::Feedforward, Arch::Gru, Arch::Lstm, Arch::BiLstm, Arch::Attention, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Feedforward => "feedforward",
            Arch::Gru => "gru",
            Arch::Lstm => "lstm",
            Arch::BiLstm => "bilstm",
            Arch::Attention => "attention",
            Arch::Transformer => "transformer",
        }
    }

    pub fn uses_heads(self) -> bool {
        matches!(self, Arch::Attention | Arch::Transformer)
    }

    /// Recurrent and feedforward models take larger batches.
    pub fn default_batch_size(self) -> usize {
        if self.uses_heads() {
            16
        } else {
            64
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.to_ascii_lowercase().replace(['-', '_'], "");
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "ff" && *a == Arch::Feedforward) || (s == "mha" && *a == Arch::Attention))
            .ok_or_else(|| format!("unknown architecture `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Input dropout rate.
    pub dropout_rate: f64,
    /// When set, dropout removes whole categorical fields, without rescaling,
    /// at training and evaluation time alike.
    pub missing_data: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Transformer,
            hidden_dim: 64,
            latent_dim: 32,
            num_layers: 2,
            num_heads: 4,
            dropout_rate: 0.0,
            missing_data: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvariantViolation(m));
        if self.hidden_dim == 0 || self.latent_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return bad("dimensions, layers and heads must be positive".into());
        }
        if self.arch.uses_heads() && self.hidden_dim % self.num_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1]", self.dropout_rate));
        }
        Ok(())
    }
}

/// Column range of one feature in the model input.
#[derive(Debug, Clone)]
struct InputSlot {
    encoded_offset: usize,
    input_offset: usize,
    width: usize,
    embedded: bool,
    categorical: bool,
}

/// A padded group of sessions ready for a forward pass. Rows are
/// session-major: row `b·len + t` is packet `t` of session `b`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub sessions: usize,
    pub len: usize,
    pub input: Tensor,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
enum Net {
    Feedforward { enc: Vec<Linear>, latent: Linear, dec: Vec<Linear>, head: Linear },
    Gru { enc: Vec<GruLayer>, latent: Linear, dec: Vec<GruLayer>, head: Linear },
    Lstm { enc: Vec<LstmLayer>, latent: Linear, dec: Vec<LstmLayer>, head: Linear },
    BiLstm { enc: Vec<(LstmLayer, LstmLayer)>, latent: Linear, dec: Vec<(LstmLayer, LstmLayer)>, head: Linear },
    Attention { proj: Linear, enc: Vec<SelfAttention>, latent: Linear, expand: Linear, dec: Vec<SelfAttention>, head: Linear },
    Transformer { proj: Linear, enc: Vec<TransformerBlock>, latent: Linear, expand: Linear, dec: Vec<TransformerBlock>, head: Linear },
}

/// An autoencoder bound to one schema.
#[derive(Debug, Clone)]
pub struct SessionAutoencoder {
    pub config: ModelConfig,
    pub store: ParameterStore,
    net: Net,
    slots: Vec<InputSlot>,
    input_width: usize,
    output_width: usize,
    activation: OutputActivation,
}

impl SessionAutoencoder {
    pub fn new(config: ModelConfig, schema: &FeatureSchema) -> Result<Self, ModelError> {
        config.validate()?;
        let mut slots = Vec::new();
        let mut input_width = 0;
        for f in &schema.features {
            let (width, embedded) = match &f.kind {
                FeatureKind::Embedded { embed_dim, .. } => (*embed_dim, true),
                k => (k.encoded_width(), false),
            };
            slots.push(InputSlot {
                encoded_offset: f.offset,
                input_offset: input_width,
                width,
                embedded,
                categorical: f.kind.is_categorical(),
            });
            input_width += width;
        }
        let output_width = schema.output_width;
        let activation = match schema.mode {
            Mode::Kal => OutputActivation::Logits,
            Mode::MseOnly => OutputActivation::Probabilities,
        };
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = build_net(&config, &mut store, &mut rng, input_width, output_width)?;
        Ok(Self { config, store, net, slots, input_width, output_width, activation })
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.output_width
    }

    pub fn activation(&self) -> OutputActivation {
        self.activation
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Pads `sessions` to the longest among them, replaces port ids with
    /// their embedding rows and applies input dropout.
    ///
    /// Dropout needs an `rng`. Ordinary dropout runs only when `training`;
    /// missing-data dropout runs regardless.
    pub fn build_batch(
        &self,
        sessions: &[&EncodedSession],
        embeddings: Option<&Tensor>,
        rng: Option<&mut dyn RngCore>,
        training: bool,
    ) -> Result<Batch, ModelError> {
        if sessions.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let len = sessions.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let b = sessions.len();
        let mut input = Tensor::zeros(b * len, self.input_width);
        let mut mask = vec![false; b * len];
        for (bi, s) in sessions.iter().enumerate() {
            for t in 0..s.len() {
                let r = bi * len + t;
                mask[r] = true;
                let src = s.values.row(t);
                let dst = input.row_mut(r);
                for slot in &self.slots {
                    let out = &mut dst[slot.input_offset..slot.input_offset + slot.width];
                    if slot.embedded {
                        let table = embeddings.ok_or(ModelError::MissingEmbeddings)?;
                        if table.cols() != slot.width {
                            return Err(ModelError::WidthMismatch { expected: slot.width, actual: table.cols() });
                        }
                        let id = src[slot.encoded_offset] as usize;
                        if id < table.rows() {
                            out.copy_from_slice(table.row(id));
                        }
                    } else {
                        out.copy_from_slice(&src[slot.encoded_offset..slot.encoded_offset + slot.width]);
                    }
                }
            }
        }
        let rate = self.config.dropout_rate;
        if let Some(rng) = rng {
            if rate > 0.0 && self.config.missing_data {
                for r in (0..b * len).filter(|&r| mask[r]) {
                    for slot in self.slots.iter().filter(|s| s.categorical) {
                        if rate >= 1.0 || rng.gen::<f64>() < rate {
                            input.row_mut(r)[slot.input_offset..slot.input_offset + slot.width].fill(0.0);
                        }
                    }
                }
            } else if rate > 0.0 && training {
                let keep = if rate >= 1.0 { 0.0 } else { 1.0 / (1.0 - rate) };
                for x in input.data_mut() {
                    *x *= if rate >= 1.0 || rng.gen::<f64>() < rate { 0.0 } else { keep };
                }
            }
        }
        Ok(Batch { sessions: b, len, input, mask })
    }

    /// Decoder output for the whole batch, `(sessions·len) × output_width`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var, ModelError> {
        if batch.input.cols() != self.input_width {
            return Err(ModelError::WidthMismatch { expected: self.input_width, actual: batch.input.cols() });
        }
        let s = &self.store;
        let x = g.constant(batch.input.clone());
        let out = match &self.net {
            Net::Feedforward { enc, latent, dec, head } => {
                let mut h = x;
                for l in enc {
                    let y = l.forward(g, s, h)?;
                    h = g.relu(y);
                }
                h = latent.forward(g, s, h)?;
                for l in dec {
                    let y = l.forward(g, s, h)?;
                    h = g.relu(y);
                }
                head.forward(g, s, h)?
            }
            Net::Gru { enc, latent, dec, head } => self.recurrent(g, batch, x, |g, mut h, steps| {
                for l in enc {
                    h = l.forward(g, s, h, steps)?;
                }
                h = latent.forward(g, s, h)?;
                for l in dec {
                    h = l.forward(g, s, h, steps)?;
                }
                head.forward(g, s, h)
            })?,
            Net::Lstm { enc, latent, dec, head } => self.recurrent(g, batch, x, |g, mut h, steps| {
                for l in enc {
                    h = l.forward(g, s, h, steps, false)?;
                }
                h = latent.forward(g, s, h)?;
                for l in dec {
                    h = l.forward(g, s, h, steps, false)?;
                }
                head.forward(g, s, h)
            })?,
            Net::BiLstm { enc, latent, dec, head } => self.recurrent(g, batch, x, |g, mut h, steps| {
                for (fwd, bwd) in enc {
                    let a = fwd.forward(g, s, h, steps, false)?;
                    let b = bwd.forward(g, s, h, steps, true)?;
                    h = g.concat_cols(&[a, b])?;
                }
                h = latent.forward(g, s, h)?;
                for (fwd, bwd) in dec {
                    let a = fwd.forward(g, s, h, steps, false)?;
                    let b = bwd.forward(g, s, h, steps, true)?;
                    h = g.concat_cols(&[a, b])?;
                }
                head.forward(g, s, h)
            })?,
            Net::Attention { proj, enc, latent, expand, dec, head } => {
                let mut h = proj.forward(g, s, x)?;
                for l in enc {
                    let a = l.forward(g, s, h, batch.len, &batch.mask)?;
                    h = g.add(h, a)?;
                }
                let z = latent.forward(g, s, h)?;
                h = expand.forward(g, s, z)?;
                for l in dec {
                    let a = l.forward(g, s, h, batch.len, &batch.mask)?;
                    h = g.add(h, a)?;
                }
                head.forward(g, s, h)?
            }
            Net::Transformer { proj, enc, latent, expand, dec, head } => {
                let pe = self.positions(batch);
                let pe = g.constant(pe);
                let h0 = proj.forward(g, s, x)?;
                let mut h = g.add(h0, pe)?;
                for l in enc {
                    h = l.forward(g, s, h, batch.len, &batch.mask)?;
                }
                let z = latent.forward(g, s, h)?;
                let e = expand.forward(g, s, z)?;
                h = g.add(e, pe)?;
                for l in dec {
                    h = l.forward(g, s, h, batch.len, &batch.mask)?;
                }
                head.forward(g, s, h)?
            }
        };
        Ok(out)
    }

    fn positions(&self, batch: &Batch) -> Tensor {
        let pe = positional_encoding(batch.len, self.config.hidden_dim);
        let mut data = Vec::with_capacity(batch.sessions * pe.len());
        for _ in 0..batch.sessions {
            data.extend_from_slice(pe.data());
        }
        Tensor::from_vec(batch.sessions * batch.len, self.config.hidden_dim, data)
    }

    /// Runs `body` on time-major rows and returns session-major output.
    fn recurrent(
        &self,
        g: &mut Graph,
        batch: &Batch,
        x: Var,
        body: impl FnOnce(&mut Graph, Var, &Steps) -> Result<Var, AutodiffError>,
    ) -> Result<Var, ModelError> {
        let (b, l) = (batch.sessions, batch.len);
        let to_time: Vec<usize> = (0..l * b).map(|r| (r % b) * l + r / b).collect();
        let to_session: Vec<usize> = (0..b * l).map(|r| (r % l) * b + r / l).collect();
        let masks = (0..l)
            .map(|t| Tensor::column((0..b).map(|bi| if batch.mask[bi * l + t] { 1.0 } else { 0.0 }).collect()))
            .collect();
        let steps = Steps { batch: b, len: l, masks };
        let xt = g.gather_rows(x, &to_time)?;
        let y = body(g, xt, &steps)?;
        Ok(g.gather_rows(y, &to_session)?)
    }

    /// Runs a batch without dropout and returns one output per session,
    /// each with `batch.len` rows.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<ModelOutputs>, ModelError> {
        let mut g = Graph::new();
        let y = self.forward(&mut g, batch)?;
        Ok(self.split_outputs(g.value(y), batch))
    }

    /// Predicts every session in chunks of `batch_size`, in order. `rng`
    /// drives missing-data dropout when configured.
    pub fn predict_sessions(
        &self,
        sessions: &[EncodedSession],
        embeddings: Option<&Tensor>,
        batch_size: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<ModelOutputs>, ModelError> {
        let mut out = Vec::with_capacity(sessions.len());
        for chunk in sessions.chunks(batch_size.max(1)) {
            let refs: Vec<&EncodedSession> = chunk.iter().collect();
            let r = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let batch = self.build_batch(&refs, embeddings, r, false)?;
            out.extend(self.predict(&batch)?);
        }
        Ok(out)
    }

    pub fn split_outputs(&self, values: &Tensor, batch: &Batch) -> Vec<ModelOutputs> {
        (0..batch.sessions)
            .map(|b| {
                let start = b * batch.len * values.cols();
                let data = values.data()[start..start + batch.len * values.cols()].to_vec();
                ModelOutputs { values: Tensor::from_vec(batch.len, values.cols(), data), activation: self.activation }
            })
            .collect()
    }
}

fn build_net(
    c: &ModelConfig,
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    input: usize,
    output: usize,
) -> Result<Net, AutodiffError> {
    let (h, z, n) = (c.hidden_dim, c.latent_dim, c.num_layers);
    Ok(match c.arch {
        Arch::Feedforward => {
            let mut enc = Vec::new();
            for i in 0..n {
                enc.push(Linear::new(store, &format!("enc.{i}"), if i == 0 { input } else { h }, h, rng)?);
            }
            let latent = Linear::new(store, "latent", h, z, rng)?;
            let mut dec = Vec::new();
            for i in 0..n {
                dec.push(Linear::new(store, &format!("dec.{i}"), if i == 0 { z } else { h }, h, rng)?);
            }
            let head = Linear::new(store, "head", h, output, rng)?;
            Net::Feedforward { enc, latent, dec, head }
        }
        Arch::Gru => {
            let mut enc = Vec::new();
            for i in 0..n {
                enc.push(GruLayer::new(store, &format!("enc.{i}"), if i == 0 { input } else { h }, h, rng)?);
            }
            let latent = Linear::new(store, "latent", h, z, rng)?;
            let mut dec = Vec::new();
            for i in 0..n {
                dec.push(GruLayer::new(store, &format!("dec.{i}"), if i == 0 { z } else { h }, h, rng)?);
            }
            let head = Linear::new(store, "head", h, output, rng)?;
            Net::Gru { enc, latent, dec, head }
        }
        Arch::Lstm => {
            let mut enc = Vec::new();
            for i in 0..n {
                enc.push(LstmLayer::new(store, &format!("enc.{i}"), if i == 0 { input } else { h }, h, rng)?);
            }
            let latent = Linear::new(store, "latent", h, z, rng)?;
            let mut dec = Vec::new();
            for i in 0..n {
                dec.push(LstmLayer::new(store, &format!("dec.{i}"), if i == 0 { z } else { h }, h, rng)?);
            }
            let head = Linear::new(store, "head", h, output, rng)?;
            Net::Lstm { enc, latent, dec, head }
        }
        Arch::BiLstm => {
            let mut pair = |store: &mut ParameterStore, name: &str, fan_in: usize| -> Result<_, AutodiffError> {
                Ok((
                    LstmLayer::new(store, &format!("{name}.fwd"), fan_in, h, rng)?,
                    LstmLayer::new(store, &format!("{name}.bwd"), fan_in, h, rng)?,
                ))
            };
            let mut enc = Vec::new();
            for i in 0..n {
                enc.push(pair(store, &format!("enc.{i}"), if i == 0 { input } else { 2 * h })?);
            }
            let mut dec = Vec::new();
            for i in 0..n {
                dec.push(pair(store, &format!("dec.{i}"), if i == 0 { z } else { 2 * h })?);
            }
            let latent = Linear::new(store, "latent", 2 * h, z, rng)?;
            let head = Linear::new(store, "head", 2 * h, output, rng)?;
            Net::BiLstm { enc, latent, dec, head }
        }
        Arch::Attention => {
            let proj = Linear::new(store, "proj", input, h, rng)?;
            let enc = (0..n)
                .map(|i| SelfAttention::new(store, &format!("enc.{i}"), h, c.num_heads, rng))
                .collect::<Result<_, _>>()?;
            let latent = Linear::new(store, "latent", h, z, rng)?;
            let expand = Linear::new(store, "expand", z, h, rng)?;
            let dec = (0..n)
                .map(|i| SelfAttention::new(store, &format!("dec.{i}"), h, c.num_heads, rng))
                .collect::<Result<_, _>>()?;
            let head = Linear::new(store, "head", h, output, rng)?;
            Net::Attention { proj, enc, latent, expand, dec, head }
        }
        Arch::Transformer => {
            let proj = Linear::new(store, "proj", input, h, rng)?;
            let enc = (0..n)
                .map(|i| TransformerBlock::new(store, &format!("enc.{i}"), h, c.num_heads, rng))
                .collect::<Result<_, _>>()?;
            let latent = Linear::new(store, "latent", h, z, rng)?;
            let expand = Linear::new(store, "expand", z, h, rng)?;
            let dec = (0..n)
                .map(|i| TransformerBlock::new(store, &format!("dec.{i}"), h, c.num_heads, rng))
                .collect::<Result<_, _>>()?;
            let head = Linear::new(store, "head", h, output, rng)?;
            Net::Transformer { proj, enc, latent, expand, dec, head }
        }
    })
}

#[cfg(test)]
mod tests;
