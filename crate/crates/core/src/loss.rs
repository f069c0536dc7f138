//! Training objectives: the typed knowledge-augmented loss and the plain
//! squared-error baseline.
//!
//! Every feature contributes one term, the mean over real packets of a
//! per-packet loss; the objective is the unweighted sum of the terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::features::{EncodedSession, FeatureId, FeatureKind, FeatureSchema, Mode, ModelOutputs, OutputActivation};

pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("expected width {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("no real packets under the mask")]
    EmptyMask,
    #[error("schema has embedded features but no embedding table was given")]
    MissingEmbeddings,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Clamps a probability into `[1e-7, 1 - 1e-7]`.
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Per-row loss targets aligned with a padded batch.
#[derive(Debug, Clone)]
pub struct Targets {
    /// Encoded target values, `rows × encoded_width`.
    pub encoded: Tensor,
    pub mask: Vec<bool>,
    /// Target vectors for embedded features, by position in the schema.
    embedded: Vec<Option<Tensor>>,
}

impl Targets {
    /// Stacks `sessions`, each padded or cut to `len` rows.
    pub fn new(
        schema: &FeatureSchema,
        sessions: &[&EncodedSession],
        len: usize,
        embeddings: Option<&Tensor>,
    ) -> Result<Self, LossError> {
        let rows = sessions.len() * len;
        let mut encoded = Tensor::zeros(rows, schema.encoded_width);
        let mut mask = vec![false; rows];
        for (b, s) in sessions.iter().enumerate() {
            for t in 0..s.len().min(len) {
                encoded.row_mut(b * len + t).copy_from_slice(s.values.row(t));
                mask[b * len + t] = true;
            }
        }
        let mut embedded = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            if let FeatureKind::Embedded { embed_dim, .. } = f.kind {
                let table = embeddings.ok_or(LossError::MissingEmbeddings)?;
                if table.cols() != embed_dim {
                    return Err(LossError::WidthMismatch { expected: embed_dim, actual: table.cols() });
                }
                let mut t = Tensor::zeros(rows, embed_dim);
                for r in (0..rows).filter(|&r| mask[r]) {
                    let id = encoded.get(r, f.offset) as usize;
                    if id < table.rows() {
                        t.row_mut(r).copy_from_slice(table.row(id));
                    }
                }
                embedded.push(Some(t));
            } else {
                embedded.push(None);
            }
        }
        Ok(Self { encoded, mask, embedded })
    }

    pub fn rows(&self) -> usize {
        self.mask.len()
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn columns(&self, start: usize, width: usize) -> Tensor {
        let mut t = Tensor::zeros(self.rows(), width);
        for r in 0..self.rows() {
            t.row_mut(r).copy_from_slice(&self.encoded.row(r)[start..start + width]);
        }
        t
    }
}

/// Loss terms recorded on a graph.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub total: Var,
    /// One `1 × 1` mean per feature, in schema order.
    pub terms: Vec<Var>,
    pub count: usize,
}

/// Row sums of `x` divided by `divisor`, as `n × 1`.
fn row_mean(g: &mut Graph, x: Var, divisor: f64) -> Result<Var, AutodiffError> {
    let w = g.shape(x)[1];
    if w == 1 {
        return Ok(if divisor == 1.0 { x } else { g.scale(x, 1.0 / divisor) });
    }
    let ones = g.constant(Tensor::filled(w, 1, 1.0 / divisor));
    g.matmul(x, ones)
}

fn squared_error(g: &mut Graph, pred: Var, target: Tensor) -> Result<Var, AutodiffError> {
    let t = g.constant(target);
    let d = g.sub(pred, t)?;
    g.mul(d, d)
}

/// `-Σ y·ln(clamp(p))` per element, for already-normalised predictions.
fn prob_cross_entropy(g: &mut Graph, p: Var, target: &Tensor, binary: bool) -> Result<Var, AutodiffError> {
    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let lp = g.ln(pc);
    let y = g.constant(target.clone());
    let mut ll = g.mul(y, lp)?;
    if binary {
        let one = g.constant(Tensor::filled(target.rows(), target.cols(), 1.0));
        let q = g.sub(one, pc)?;
        let lq = g.ln(q);
        let ny = g.constant(target.map(|v| 1.0 - v));
        let neg = g.mul(ny, lq)?;
        ll = g.add(ll, neg)?;
    }
    Ok(g.scale(ll, -1.0))
}

/// Builds the objective for `outputs` (`rows × output_width`) on `g`.
pub fn loss_on_graph(
    g: &mut Graph,
    schema: &FeatureSchema,
    outputs: Var,
    activation: OutputActivation,
    targets: &Targets,
) -> Result<LossGraph, LossError> {
    let [rows, cols] = g.shape(outputs);
    if cols != schema.output_width {
        return Err(LossError::WidthMismatch { expected: schema.output_width, actual: cols });
    }
    if rows != targets.rows() {
        return Err(LossError::WidthMismatch { expected: targets.rows(), actual: rows });
    }
    let count = targets.count();
    if count == 0 {
        return Err(LossError::EmptyMask);
    }
    let mut terms = Vec::with_capacity(schema.features.len());
    for (k, f) in schema.features.iter().enumerate() {
        let w = f.output_width();
        let pred = g.slice_cols(outputs, f.output_offset, w)?;
        let per_row = match (&f.kind, schema.mode, activation) {
            (FeatureKind::Embedded { embed_dim, .. }, _, _) => {
                let target = targets.embedded[k].clone().expect("built for embedded features");
                let se = squared_error(g, pred, target)?;
                row_mean(g, se, *embed_dim as f64)?
            }
            (_, Mode::MseOnly, _) | (FeatureKind::Numeric { .. }, _, _) => {
                let se = squared_error(g, pred, targets.columns(f.offset, f.width()))?;
                row_mean(g, se, w as f64)?
            }
            (FeatureKind::Binary { .. }, Mode::Kal, OutputActivation::Logits) => {
                g.bce_with_logits(pred, targets.columns(f.offset, 1))?
            }
            (FeatureKind::Binary { .. }, Mode::Kal, OutputActivation::Probabilities) => {
                prob_cross_entropy(g, pred, &targets.columns(f.offset, 1), true)?
            }
            (FeatureKind::OneHot { .. }, Mode::Kal, OutputActivation::Logits) => {
                g.softmax_cross_entropy(pred, targets.columns(f.offset, w))?
            }
            (FeatureKind::OneHot { .. }, Mode::Kal, OutputActivation::Probabilities) => {
                let ce = prob_cross_entropy(g, pred, &targets.columns(f.offset, w), false)?;
                row_mean(g, ce, 1.0)?
            }
        };
        terms.push(g.masked_mean(per_row, &targets.mask)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossGraph { total, terms, count })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub feature: FeatureId,
    pub kind: String,
    /// Mean over real packets.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
    pub packets: usize,
}

impl LossReport {
    /// Reads term values off an evaluated graph.
    pub fn from_graph(g: &Graph, schema: &FeatureSchema, lg: &LossGraph) -> Self {
        let terms = schema
            .features
            .iter()
            .zip(&lg.terms)
            .map(|(f, &v)| LossTerm { feature: f.id, kind: f.kind.label().to_string(), value: g.value(v).item() })
            .collect();
        Self { terms, total: g.value(lg.total).item(), packets: lg.count }
    }

    pub fn term(&self, id: FeatureId) -> Option<f64> {
        self.terms.iter().find(|t| t.feature == id).map(|t| t.value)
    }

    /// Mean of the terms of categorical (non-numeric) features.
    pub fn categorical_mean(&self) -> f64 {
        let cat: Vec<f64> = self.terms.iter().filter(|t| t.kind != "numeric").map(|t| t.value).collect();
        if cat.is_empty() {
            0.0
        } else {
            cat.iter().sum::<f64>() / cat.len() as f64
        }
    }

    /// Packet-weighted combination of reports over disjoint packet sets.
    /// Equal to the report computed over the union in one pass.
    pub fn combine(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let packets: usize = reports.iter().map(|r| r.packets).sum();
        if packets == 0 {
            return None;
        }
        let terms: Vec<LossTerm> = first
            .terms
            .iter()
            .enumerate()
            .map(|(k, t)| LossTerm {
                feature: t.feature,
                kind: t.kind.clone(),
                value: reports.iter().map(|r| r.terms[k].value * r.packets as f64).sum::<f64>() / packets as f64,
            })
            .collect();
        let total = terms.iter().map(|t| t.value).sum();
        Some(LossReport { terms, total, packets })
    }
}

/// Loss of one session's outputs against its encoding.
pub fn compute_loss(
    outputs: &ModelOutputs,
    target: &EncodedSession,
    schema: &FeatureSchema,
    embeddings: Option<&Tensor>,
) -> Result<LossReport, LossError> {
    let len = outputs.values.rows();
    let targets = Targets::new(schema, &[target], len, embeddings)?;
    let mut g = Graph::new();
    let out = g.constant(outputs.values.clone());
    let lg = loss_on_graph(&mut g, schema, out, outputs.activation, &targets)?;
    Ok(LossReport::from_graph(&g, schema, &lg))
}
