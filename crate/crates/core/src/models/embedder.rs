use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{Graph, ParameterStore, Tensor};
use crate::features::DEFAULT_EMBED_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub embed_dim: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { embed_dim: DEFAULT_EMBED_DIM, max_epochs: 2000, lr: 0.01, target_accuracy: 0.99, seed: 0 }
    }
}

/// Port id → vector table with the classification head used to train it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortEmbedder {
    /// `vocabulary × embed_dim`.
    pub table: Tensor,
    head_w: Tensor,
    head_b: Tensor,
    pub epochs_trained: usize,
}

impl PortEmbedder {
    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.table.cols()
    }

    fn logits(&self) -> Tensor {
        let mut g = Graph::new();
        let t = g.constant(self.table.clone());
        let w = g.constant(self.head_w.clone());
        let b = g.constant(self.head_b.clone());
        let y = g.matmul(t, w).expect("shapes fixed at construction");
        let y = g.add_row(y, b).expect("shapes fixed at construction");
        g.value(y).clone()
    }

    /// Fraction of ids whose head argmax recovers the id.
    pub fn head_accuracy(&self) -> f64 {
        let logits = self.logits();
        let hits = (0..self.vocab_size())
            .filter(|&i| {
                let row = logits.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == i
            })
            .count();
        hits as f64 / self.vocab_size() as f64
    }

    /// Fraction of ids whose own embedding decodes back to them by
    /// nearest-neighbour search over the table.
    pub fn nearest_neighbor_accuracy(&self) -> f64 {
        let hits = (0..self.vocab_size())
            .filter(|&i| crate::features::nearest_row(&self.table, self.table.row(i)) == i)
            .count();
        hits as f64 / self.vocab_size() as f64
    }

    /// Smallest Euclidean distance between two distinct rows.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.vocab_size() {
            for j in i + 1..self.vocab_size() {
                let d: f64 = self.table.row(i).iter().zip(self.table.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }
}

/// Trains `id → embedding → logits` with cross-entropy until the head
/// classifies the target fraction of ids or the epoch budget runs out.
pub fn pretrain_port_embedder(vocab_size: usize, cfg: &PretrainConfig) -> Result<PortEmbedder, ModelError> {
    if vocab_size == 0 {
        return Err(ModelError::EmptyVocabulary);
    }
    let d = cfg.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParameterStore::new();
    let table_init = Tensor::from_vec(vocab_size, d, (0..vocab_size * d).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let table = store.add("table", table_init, false)?;
    let w = store.add_weight("head.w", d, vocab_size, &mut rng)?;
    let b = store.add_bias("head.b", vocab_size)?;
    let targets = {
        let mut t = Tensor::zeros(vocab_size, vocab_size);
        for i in 0..vocab_size {
            t.set(i, i, 1.0);
        }
        t
    };
    let snapshot = |store: &ParameterStore, epochs| PortEmbedder {
        table: store.value(table).clone(),
        head_w: store.value(w).clone(),
        head_b: store.value(b).clone(),
        epochs_trained: epochs,
    };
    let mut epochs = 0;
    loop {
        let current = snapshot(&store, epochs);
        if current.head_accuracy() >= cfg.target_accuracy || epochs >= cfg.max_epochs {
            log::info!("port embedder: {} ids, {} epochs, head accuracy {:.4}", vocab_size, epochs, current.head_accuracy());
            return Ok(current);
        }
        let mut g = Graph::new();
        let tv = g.param(&store, table);
        let wv = g.param(&store, w);
        let bv = g.param(&store, b);
        let y = g.matmul(tv, wv)?;
        let y = g.add_row(y, bv)?;
        let ce = g.softmax_cross_entropy(y, targets.clone())?;
        let total = g.sum(ce);
        let loss = g.scale(total, 1.0 / vocab_size as f64);
        let grads = g.backward(loss)?;
        store.adam_step(&grads, cfg.lr, 0.0)?;
        epochs += 1;
    }
}
