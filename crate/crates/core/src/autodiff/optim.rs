use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn insert(&mut self, id: ParamId, g: Tensor) {
        self.map.insert(id, g);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds `other` into `self`, keeping ids seen in either.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(existing) => existing.add_assign(&g),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Param {
    name: String,
    value: Tensor,
    /// Weight decay applies only when set (weights, not biases).
    decay: bool,
    m: Tensor,
    v: Tensor,
}

/// Named trainable tensors with Adam moments and a shared step counter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    params: Vec<Param>,
    step: u64,
    #[serde(skip)]
    adam: AdamState,
}

#[derive(Debug, Clone, Copy, Default)]
struct AdamState {
    custom: Option<AdamConfig>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    store: ParameterStore,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_adam(config: AdamConfig) -> Self {
        Self { adam: AdamState { custom: Some(config) }, ..Self::default() }
    }

    pub fn add(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId, AutodiffError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(AutodiffError::DuplicateParameter(name.to_string()));
        }
        let [r, c] = value.shape();
        self.params.push(Param {
            name: name.to_string(),
            value,
            decay,
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform weight matrix, subject to weight decay.
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<ParamId, AutodiffError> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data), true)
    }

    /// Zero `1 × cols` bias, exempt from weight decay.
    pub fn add_bias(&mut self, name: &str, cols: usize) -> Result<ParamId, AutodiffError> {
        self.add(name, Tensor::zeros(1, cols), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One Adam update with decoupled weight decay `θ -= lr·wd·θ` on
    /// weights. Every parameter needs a gradient.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<(), AutodiffError> {
        for (i, p) in self.params.iter().enumerate() {
            match grads.get(ParamId(i)) {
                None => return Err(AutodiffError::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam_step",
                        left: p.value.shape(),
                        right: g.shape(),
                    })
                }
                Some(_) => {}
            }
        }
        let cfg = self.adam.custom.unwrap_or_default();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in self.params.iter_mut().enumerate() {
            let g = grads.get(ParamId(i)).expect("checked above");
            let wd = if p.decay { weight_decay } else { 0.0 };
            let Param { value, m, v, .. } = p;
            for (((x, mi), vi), gi) in value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                let old = *x;
                *x = old - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * wd * old;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, AutodiffError> {
        let ck = Checkpoint { version: CHECKPOINT_VERSION, store: self.clone() };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self, AutodiffError> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        for p in &ck.store.params {
            if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
                return Err(AutodiffError::Checkpoint(format!("moment shape mismatch for `{}`", p.name)));
            }
        }
        Ok(ck.store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AutodiffError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Copies values from `other` by name; names and shapes must match.
    pub fn load_values_from(&mut self, other: &ParameterStore) -> Result<(), AutodiffError> {
        if other.params.len() != self.params.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "expected {} parameters, checkpoint has {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(AutodiffError::Checkpoint(format!("shape mismatch for `{}`", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}
