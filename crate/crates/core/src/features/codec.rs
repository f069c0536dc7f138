use serde::{Deserialize, Serialize};

use super::{FeatureError, FeatureId, FeatureKind, FeatureSchema};
use crate::autodiff::Tensor;
use crate::session::{Direction, Session, SessionPacket};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EncodeEvent {
    /// The session had more packets than `max_len`; the tail was dropped.
    Truncated { original_len: usize, max_len: usize },
    /// A categorical value absent from the fitted schema.
    UnseenCategory { feature: FeatureId, packet: usize, value: i64 },
}

/// One session as a padded matrix, `max_len × encoded_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSession {
    pub session_id: usize,
    pub values: Tensor,
    /// `true` for rows holding a real packet; always a prefix.
    pub mask: Vec<bool>,
    pub events: Vec<EncodeEvent>,
}

impl EncodedSession {
    /// Number of real packets.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.mask.len()
    }
}

/// How binary and one-hot output columns should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    /// Unbounded scores: sigmoid/softmax still to be applied.
    Logits,
    /// Already probabilities (or raw regression values in MSE-only mode).
    Probabilities,
}

/// Decoder output for one session, `rows × output_width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub values: Tensor,
    pub activation: OutputActivation,
}

fn scale(x: i64, min: f64, max: f64) -> f64 {
    let r = max - min;
    if r <= 0.0 {
        0.0
    } else {
        ((x as f64 - min) / r).clamp(0.0, 1.0)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl FeatureSchema {
    /// Encodes the first `max_len` packets of `session`; shorter sessions are
    /// zero-padded with mask `false`.
    pub fn encode_session(&self, session: &Session, max_len: usize) -> EncodedSession {
        let n = session.packets.len().min(max_len);
        let mut values = Tensor::zeros(max_len, self.encoded_width);
        let mut events = Vec::new();
        if session.packets.len() > max_len {
            events.push(EncodeEvent::Truncated { original_len: session.packets.len(), max_len });
        }
        for (i, sp) in session.packets.iter().take(n).enumerate() {
            let row = values.row_mut(i);
            for f in &self.features {
                let v = f.id.raw_value(sp);
                let mut unseen = false;
                match &f.kind {
                    FeatureKind::Numeric { min, max } => row[f.offset] = scale(v, *min, *max),
                    FeatureKind::Binary { zero_value, one_value } => {
                        unseen = v != *zero_value && v != *one_value;
                        let one = zero_value != one_value && (v - one_value).abs() < (v - zero_value).abs();
                        row[f.offset] = if one { 1.0 } else { 0.0 };
                    }
                    FeatureKind::OneHot { categories } => match categories.iter().position(|&c| c == v) {
                        Some(k) => row[f.offset + k] = 1.0,
                        None => unseen = true,
                    },
                    FeatureKind::Embedded { vocabulary, .. } => {
                        let id = vocabulary.binary_search(&v).unwrap_or_else(|_| {
                            unseen = true;
                            vocabulary.len()
                        });
                        row[f.offset] = id as f64;
                    }
                }
                if unseen {
                    events.push(EncodeEvent::UnseenCategory { feature: f.id, packet: i, value: v });
                }
            }
        }
        let mask = (0..max_len).map(|i| i < n).collect();
        EncodedSession { session_id: session.id, values, mask, events }
    }

    pub fn encode_sessions(&self, sessions: &[Session], max_len: usize) -> Vec<EncodedSession> {
        sessions.iter().map(|s| self.encode_session(s, max_len)).collect()
    }

    /// Perfect decoder outputs for `encoded`, in probability space. Port
    /// slots take their embedding row (zeros when out of vocabulary).
    pub fn identity_outputs(&self, encoded: &EncodedSession, embeddings: Option<&Tensor>) -> Result<ModelOutputs, FeatureError> {
        let rows = encoded.max_len();
        let mut out = Tensor::zeros(rows, self.output_width);
        for r in 0..encoded.len() {
            let src = encoded.values.row(r);
            let dst = out.row_mut(r);
            for f in &self.features {
                match &f.kind {
                    FeatureKind::Embedded { embed_dim, .. } => {
                        let table = self.check_table(embeddings)?;
                        let id = src[f.offset] as usize;
                        if id < table.rows() {
                            dst[f.output_offset..f.output_offset + embed_dim].copy_from_slice(table.row(id));
                        }
                    }
                    _ => {
                        let w = f.width();
                        dst[f.output_offset..f.output_offset + w].copy_from_slice(&src[f.offset..f.offset + w]);
                    }
                }
            }
        }
        Ok(ModelOutputs { values: out, activation: OutputActivation::Probabilities })
    }

    fn check_table<'a>(&self, embeddings: Option<&'a Tensor>) -> Result<&'a Tensor, FeatureError> {
        let table = embeddings.ok_or_else(|| FeatureError::SchemaMismatch("port embedding table required".into()))?;
        let dim = self.embed_dim().unwrap_or(0);
        if table.rows() != self.port_vocabulary.len() || table.cols() != dim {
            return Err(FeatureError::SchemaMismatch(format!(
                "embedding table is {:?}, schema needs [{}, {}]",
                table.shape(),
                self.port_vocabulary.len(),
                dim
            )));
        }
        Ok(table)
    }

    /// Decodes the first `n_packets` output rows into packets.
    ///
    /// Addresses, MACs and absolute timestamps come from `template` (the
    /// session being reconstructed) according to each decoded direction.
    /// The TCP checksum is computed over the decoded header with a zero
    /// payload; the IP checksum is whatever the model predicted.
    pub fn decode_outputs(
        &self,
        outputs: &ModelOutputs,
        n_packets: usize,
        template: &Session,
        embeddings: Option<&Tensor>,
    ) -> Result<Vec<SessionPacket>, FeatureError> {
        if outputs.values.cols() != self.output_width {
            return Err(FeatureError::WidthMismatch { expected: self.output_width, actual: outputs.values.cols() });
        }
        if outputs.values.rows() < n_packets {
            return Err(FeatureError::WidthMismatch { expected: n_packets, actual: outputs.values.rows() });
        }
        let seed = template
            .packets
            .first()
            .ok_or_else(|| FeatureError::SchemaMismatch("template session has no packets".into()))?;
        let table = if self.embed_dim().is_some() { Some(self.check_table(embeddings)?) } else { None };
        let mut decoded = Vec::with_capacity(n_packets);
        for r in 0..n_packets {
            let row = outputs.values.row(r);
            let mut sp = seed.clone();
            for f in &self.features {
                let cols = &row[f.output_offset..f.output_offset + f.output_width()];
                let value = match &f.kind {
                    FeatureKind::Numeric { min, max } => {
                        let x = if cols[0].is_finite() { cols[0] } else { 0.0 };
                        (x * (max - min) + min).round() as i64
                    }
                    FeatureKind::Binary { zero_value, one_value } => {
                        let on = match outputs.activation {
                            OutputActivation::Logits => cols[0] >= 0.0,
                            OutputActivation::Probabilities => cols[0] >= 0.5,
                        };
                        if on {
                            *one_value
                        } else {
                            *zero_value
                        }
                    }
                    FeatureKind::OneHot { categories } => categories[argmax(cols)],
                    FeatureKind::Embedded { vocabulary, .. } => {
                        let table = table.expect("checked above");
                        vocabulary[nearest_row(table, cols)]
                    }
                };
                f.id.set_raw(&mut sp, value);
            }
            let (src, dst, src_mac, dst_mac) = match sp.ip_direction {
                Direction::Forward => (template.initiator, template.responder, template.initiator_mac, template.responder_mac),
                Direction::Reverse => (template.responder, template.initiator, template.responder_mac, template.initiator_mac),
            };
            let p = &mut sp.packet;
            p.src_ip = src.ip;
            p.dst_ip = dst.ip;
            p.src_mac = src_mac;
            p.dst_mac = dst_mac;
            let ts = template.start_us.saturating_add(sp.time_since_us);
            p.ts_sec = (ts / 1_000_000).min(u64::from(u32::MAX)) as u32;
            p.ts_usec = (ts % 1_000_000) as u32;
            p.tcp_chksum = p.compute_tcp_checksum();
            decoded.push(sp);
        }
        Ok(decoded)
    }
}

/// Index of the table row closest to `v` in Euclidean distance; ties go to
/// the lower index.
pub fn nearest_row(table: &Tensor, v: &[f64]) -> usize {
    let mut best = (0, f64::INFINITY);
    for r in 0..table.rows() {
        let d: f64 = table.row(r).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (r, d);
        }
    }
    best.0
}
