//! Per-feature evaluation tables and report files.
//!
//! Every feature gets its loss term, a squared error in scaled units and in
//! original units (numeric features only), and an exact-match reconstruction
//! error. Averages weigh each packet equally, so long sessions count more.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::enforce::{enforce, ConstraintSpec, Violation};
use crate::features::{EncodedSession, FeatureError, FeatureId, FeatureKind, FeatureSchema, Mode, ModelOutputs};
use crate::loss::{compute_loss, LossError, LossReport};
use crate::models::{ModelError, SessionAutoencoder};
use crate::session::{Session, SessionPacket};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("nothing to report")]
    EmptyInput,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `mse · (max − min)²`: the squared error after undoing min-max scaling.
pub fn scaled_mse(mse: f64, min: f64, max: f64) -> f64 {
    mse * (max - min) * (max - min)
}

/// One feature of one packet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    pub session_id: usize,
    pub packet: usize,
    pub feature: FeatureId,
    /// Squared error in scaled units; numeric features only.
    pub squared_error: Option<f64>,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMetrics {
    pub feature: FeatureId,
    pub kind: String,
    pub loss: f64,
    pub mse: Option<f64>,
    pub scaled_mse: Option<f64>,
    /// Fraction of packets whose decoded value differs from the original.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub mode: Mode,
    pub features: Vec<FeatureMetrics>,
    pub packets: usize,
    pub total_loss: f64,
    /// Mean of the per-feature reconstruction errors.
    pub mean_reconstruction_error: f64,
}

impl MetricsTable {
    pub fn feature(&self, id: FeatureId) -> Option<&FeatureMetrics> {
        self.features.iter().find(|f| f.feature == id)
    }

    /// Mean loss over non-numeric features.
    pub fn categorical_loss(&self) -> f64 {
        let cat: Vec<f64> = self.features.iter().filter(|f| f.kind != "numeric").map(|f| f.loss).collect();
        if cat.is_empty() {
            0.0
        } else {
            cat.iter().sum::<f64>() / cat.len() as f64
        }
    }

    /// Worst reconstruction error among features of the given kind label.
    pub fn max_error_of_kind(&self, kind: &str) -> Option<f64> {
        self.features.iter().filter(|f| f.kind == kind).map(|f| f.reconstruction_error).reduce(f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub before: MetricsTable,
    /// Present when a constraint spec was supplied.
    pub after: Option<MetricsTable>,
    pub records: Vec<PacketRecord>,
    /// `(session id, violation)` found while enforcing.
    pub violations: Vec<(usize, Violation)>,
    /// Decoded sessions, enforced when a spec was supplied.
    pub decoded: Vec<Vec<SessionPacket>>,
}

fn matches(id: FeatureId, decoded: &SessionPacket, original: &SessionPacket) -> bool {
    let (a, b) = (id.raw_value(decoded), id.raw_value(original));
    if id == FeatureId::TimeSince {
        (a - b).abs() <= 1
    } else {
        a == b
    }
}

fn build_table(
    schema: &FeatureSchema,
    loss: &LossReport,
    counts: &[usize],
    sq_sums: &[f64],
    packets: usize,
) -> MetricsTable {
    let features: Vec<FeatureMetrics> = schema
        .features
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (mse, scaled) = match f.kind {
                FeatureKind::Numeric { min, max } => {
                    let mse = sq_sums[k] / packets as f64;
                    (Some(mse), Some(scaled_mse(mse, min, max)))
                }
                _ => (None, None),
            };
            FeatureMetrics {
                feature: f.id,
                kind: f.kind.label().to_string(),
                loss: loss.terms[k].value,
                mse,
                scaled_mse: scaled,
                reconstruction_error: counts[k] as f64 / packets as f64,
            }
        })
        .collect();
    let mean = features.iter().map(|f| f.reconstruction_error).sum::<f64>() / features.len().max(1) as f64;
    MetricsTable { mode: schema.mode, features, packets, total_loss: loss.total, mean_reconstruction_error: mean }
}

/// Scores decoder `outputs` against the sessions they reconstruct.
///
/// `sessions[i]`, `encoded[i]` and `outputs[i]` describe the same session.
/// With a `spec`, decoded sessions are also enforced and scored again.
pub fn evaluate_outputs(
    schema: &FeatureSchema,
    sessions: &[Session],
    encoded: &[EncodedSession],
    outputs: &[ModelOutputs],
    embeddings: Option<&Tensor>,
    spec: Option<&ConstraintSpec>,
) -> Result<Evaluation, MetricsError> {
    if sessions.len() != encoded.len() || sessions.len() != outputs.len() {
        return Err(MetricsError::SchemaMismatch(format!(
            "{} sessions, {} encodings, {} outputs",
            sessions.len(),
            encoded.len(),
            outputs.len()
        )));
    }
    let nf = schema.features.len();
    let mut reports = Vec::new();
    let mut records = Vec::new();
    let mut wrong = vec![0usize; nf];
    let mut wrong_after = vec![0usize; nf];
    let mut sq = vec![0f64; nf];
    let mut violations = Vec::new();
    let mut decoded_all = Vec::new();
    let mut packets = 0;
    for ((session, enc), out) in sessions.iter().zip(encoded).zip(outputs) {
        if session.id != enc.session_id {
            return Err(MetricsError::SchemaMismatch(format!(
                "session {} paired with encoding of {}",
                session.id, enc.session_id
            )));
        }
        let n = enc.len();
        if n == 0 {
            continue;
        }
        reports.push(compute_loss(out, enc, schema, embeddings)?);
        let decoded = schema.decode_outputs(out, n, session, embeddings)?;
        for t in 0..n {
            let original = &session.packets[t];
            for (k, f) in schema.features.iter().enumerate() {
                let squared_error = match f.kind {
                    FeatureKind::Numeric { .. } => {
                        let d = out.values.get(t, f.output_offset) - enc.values.get(t, f.offset);
                        sq[k] += d * d;
                        Some(d * d)
                    }
                    _ => None,
                };
                let exact = matches(f.id, &decoded[t], original);
                wrong[k] += usize::from(!exact);
                records.push(PacketRecord { session_id: session.id, packet: t, feature: f.id, squared_error, exact });
            }
        }
        packets += n;
        let final_packets = match spec {
            Some(spec) => {
                let (fixed, found) = enforce(&decoded, spec);
                violations.extend(found.into_iter().map(|v| (session.id, v)));
                for (t, sp) in fixed.iter().enumerate() {
                    for (k, f) in schema.features.iter().enumerate() {
                        wrong_after[k] += usize::from(!matches(f.id, sp, &session.packets[t]));
                    }
                }
                fixed
            }
            None => decoded,
        };
        decoded_all.push(final_packets);
    }
    let loss = LossReport::combine(&reports).ok_or(MetricsError::EmptyInput)?;
    let before = build_table(schema, &loss, &wrong, &sq, packets);
    let after = spec.map(|_| build_table(schema, &loss, &wrong_after, &sq, packets));
    Ok(Evaluation { before, after, records, violations, decoded: decoded_all })
}

/// Runs `model` over `encoded` and scores the result.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &SessionAutoencoder,
    schema: &FeatureSchema,
    sessions: &[Session],
    encoded: &[EncodedSession],
    embeddings: Option<&Tensor>,
    spec: Option<&ConstraintSpec>,
    batch_size: usize,
    rng: Option<&mut dyn RngCore>,
) -> Result<Evaluation, MetricsError> {
    if model.output_width() != schema.output_width {
        return Err(MetricsError::SchemaMismatch(format!(
            "model emits {} columns, schema expects {}",
            model.output_width(),
            schema.output_width
        )));
    }
    let outputs = model.predict_sessions(encoded, embeddings, batch_size, rng)?;
    evaluate_outputs(schema, sessions, encoded, &outputs, embeddings, spec)
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |x| format!("{x:e}"))
}

/// One row per feature: `feature,kind,loss,mse,scaled_mse,reconstruction_error`.
pub fn write_table_csv<W: Write>(out: W, table: &MetricsTable) -> Result<(), MetricsError> {
    if table.features.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["feature", "kind", "loss", "mse", "scaled_mse", "reconstruction_error"])?;
    for f in &table.features {
        w.write_record([
            f.feature.name().to_string(),
            f.kind.clone(),
            format!("{:e}", f.loss),
            na(f.mse),
            na(f.scaled_mse),
            format!("{:.6}", f.reconstruction_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_table_csv(path: impl AsRef<Path>, table: &MetricsTable) -> Result<(), MetricsError> {
    if table.features.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    write_table_csv(std::fs::File::create(path)?, table)
}

/// A labelled line on a plot, optionally with per-point `(low, high)` bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub bars: Option<Vec<(f64, f64)>>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self { label: label.into(), points, bars: None }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 * hi.abs().max(1.0) {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Renders a line plot as a standalone SVG document.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String, MetricsError> {
    let finite = |&(x, y): &(f64, f64)| x.is_finite() && y.is_finite();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for p in s.points.iter().filter(|p| finite(p)) {
            xs.push(p.0);
            ys.push(p.1);
        }
        for &(lo, hi) in s.bars.iter().flatten() {
            ys.extend([lo, hi].into_iter().filter(|v| v.is_finite()));
        }
    }
    if xs.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (x0, x1) = span(xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = span(ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (80.0, 180.0, 40.0, 60.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (left + w - right) / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        h - bottom,
        w - right
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(xv),
            h - bottom + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, py(yv) + 4.0, tick_label(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            w - right,
            py(yv),
            py(yv)
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (left + w - right) / 2.0, h - 18.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text transform="translate(20 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
        (top + h - bottom) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().filter(|p| finite(p)).map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        for (j, &(x, y)) in s.points.iter().enumerate() {
            if !finite(&(x, y)) {
                continue;
            }
            if let Some(&(lo, hi)) = s.bars.as_ref().and_then(|b| b.get(j)) {
                if lo.is_finite() && hi.is_finite() {
                    let _ = writeln!(
                        svg,
                        r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="{color}"/>"#,
                        px(x),
                        px(x),
                        py(lo),
                        py(hi)
                    );
                }
            }
            if s.points.len() <= 50 {
                let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - right + 12.0,
            w - right + 32.0,
            w - right + 38.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the plot; no file is created when there is nothing to draw.
pub fn save_svg(path: impl AsRef<Path>, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<(), MetricsError> {
    let svg = render_svg(title, x_label, y_label, series)?;
    std::fs::write(path, svg)?;
    Ok(())
}
