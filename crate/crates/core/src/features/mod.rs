//! Per-packet feature schema: which header fields are modelled, how each is
//! encoded, and the fitted scaling parameters.

mod codec;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::TcpFlags;
use crate::session::{Direction, Session, SessionPacket};

pub use codec::{nearest_row, EncodeEvent, EncodedSession, ModelOutputs, OutputActivation};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_MAX_LEN: usize = 32;
/// One-hot features with this many categories or more trigger an audit note.
pub const ONE_HOT_LIMIT: usize = 10;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("no training packets")]
    EmptyTrainingSet,
    #[error("schema does not match: {0}")]
    SchemaMismatch(String),
    #[error("expected width {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("unsupported schema version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Every modelled header field, in schema order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureId {
    TcpAck,
    TcpSeq,
    IpChksum,
    IpId,
    TcpWindow,
    TimeSince,
    IpLen,
    PayloadSize,
    IpTtl,
    IpTos,
    TcpDataofs,
    SrcPort,
    DstPort,
    IpDirection,
    TcpFlagFin,
    TcpFlagSyn,
    TcpFlagRst,
    TcpFlagPsh,
    TcpFlagAck,
    TcpFlagUrg,
    TcpFlagEce,
    TcpFlagCwr,
    IpVersion,
    IpIhl,
    IpProto,
    IpFrag,
    IpFlags,
    TcpUrgptr,
}

impl FeatureId {
    pub const ALL: [FeatureId; 28] = [
        FeatureId::TcpAck,
        FeatureId::TcpSeq,
        FeatureId::IpChksum,
        FeatureId::IpId,
        FeatureId::TcpWindow,
        FeatureId::TimeSince,
        FeatureId::IpLen,
        FeatureId::PayloadSize,
        FeatureId::IpTtl,
        FeatureId::IpTos,
        FeatureId::TcpDataofs,
        FeatureId::SrcPort,
        FeatureId::DstPort,
        FeatureId::IpDirection,
        FeatureId::TcpFlagFin,
        FeatureId::TcpFlagSyn,
        FeatureId::TcpFlagRst,
        FeatureId::TcpFlagPsh,
        FeatureId::TcpFlagAck,
        FeatureId::TcpFlagUrg,
        FeatureId::TcpFlagEce,
        FeatureId::TcpFlagCwr,
        FeatureId::IpVersion,
        FeatureId::IpIhl,
        FeatureId::IpProto,
        FeatureId::IpFrag,
        FeatureId::IpFlags,
        FeatureId::TcpUrgptr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureId::TcpAck => "tcp_ack",
            FeatureId::TcpSeq => "tcp_seq",
            FeatureId::IpChksum => "ip_chksum",
            FeatureId::IpId => "ip_id",
            FeatureId::TcpWindow => "tcp_window",
            FeatureId::TimeSince => "time_since",
            FeatureId::IpLen => "ip_len",
            FeatureId::PayloadSize => "payload_size",
            FeatureId::IpTtl => "ip_ttl",
            FeatureId::IpTos => "ip_tos",
            FeatureId::TcpDataofs => "tcp_dataofs",
            FeatureId::SrcPort => "src_port",
            FeatureId::DstPort => "dst_port",
            FeatureId::IpDirection => "ip_direction",
            FeatureId::TcpFlagFin => "tcp_flag_FIN",
            FeatureId::TcpFlagSyn => "tcp_flag_SYN",
            FeatureId::TcpFlagRst => "tcp_flag_RST",
            FeatureId::TcpFlagPsh => "tcp_flag_PSH",
            FeatureId::TcpFlagAck => "tcp_flag_ACK",
            FeatureId::TcpFlagUrg => "tcp_flag_URG",
            FeatureId::TcpFlagEce => "tcp_flag_ECE",
            FeatureId::TcpFlagCwr => "tcp_flag_CWR",
            FeatureId::IpVersion => "ip_version",
            FeatureId::IpIhl => "ip_ihl",
            FeatureId::IpProto => "ip_proto",
            FeatureId::IpFrag => "ip_frag",
            FeatureId::IpFlags => "ip_flags",
            FeatureId::TcpUrgptr => "tcp_urgptr",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|f| f.name() == name)
    }

    fn flag_bit(self) -> Option<u8> {
        Some(match self {
            FeatureId::TcpFlagFin => TcpFlags::FIN,
            FeatureId::TcpFlagSyn => TcpFlags::SYN,
            FeatureId::TcpFlagRst => TcpFlags::RST,
            FeatureId::TcpFlagPsh => TcpFlags::PSH,
            FeatureId::TcpFlagAck => TcpFlags::ACK,
            FeatureId::TcpFlagUrg => TcpFlags::URG,
            FeatureId::TcpFlagEce => TcpFlags::ECE,
            FeatureId::TcpFlagCwr => TcpFlags::CWR,
            _ => return None,
        })
    }

    /// Inclusive range of values the underlying field can store.
    pub fn storage_range(self) -> (i64, i64) {
        use FeatureId::*;
        match self {
            TcpAck | TcpSeq => (0, u32::MAX as i64),
            IpChksum | IpId | TcpWindow | IpLen | PayloadSize | SrcPort | DstPort | TcpUrgptr => (0, u16::MAX as i64),
            TimeSince => (0, i64::MAX),
            IpTtl | IpTos | IpProto => (0, u8::MAX as i64),
            TcpDataofs | IpVersion | IpIhl => (0, 15),
            IpFrag => (0, 8191),
            IpFlags => (0, 7),
            IpDirection | TcpFlagFin | TcpFlagSyn | TcpFlagRst | TcpFlagPsh | TcpFlagAck | TcpFlagUrg
            | TcpFlagEce | TcpFlagCwr => (0, 1),
        }
    }

    /// Raw integer value; `time_since` is in microseconds.
    pub fn raw_value(self, sp: &SessionPacket) -> i64 {
        let p = &sp.packet;
        if let Some(bit) = self.flag_bit() {
            return i64::from(p.tcp_flags.contains(bit));
        }
        match self {
            FeatureId::TcpAck => p.tcp_ack.into(),
            FeatureId::TcpSeq => p.tcp_seq.into(),
            FeatureId::IpChksum => p.ip_chksum.into(),
            FeatureId::IpId => p.ip_id.into(),
            FeatureId::TcpWindow => p.tcp_window.into(),
            FeatureId::TimeSince => sp.time_since_us.min(i64::MAX as u64) as i64,
            FeatureId::IpLen => p.ip_len.into(),
            FeatureId::PayloadSize => p.payload_size.into(),
            FeatureId::IpTtl => p.ip_ttl.into(),
            FeatureId::IpTos => p.ip_tos.into(),
            FeatureId::TcpDataofs => p.tcp_dataofs.into(),
            FeatureId::SrcPort => p.src_port.into(),
            FeatureId::DstPort => p.dst_port.into(),
            FeatureId::IpDirection => sp.ip_direction.bit().into(),
            FeatureId::IpVersion => p.ip_version.into(),
            FeatureId::IpIhl => p.ip_ihl.into(),
            FeatureId::IpProto => p.ip_proto.into(),
            FeatureId::IpFrag => p.ip_frag.into(),
            FeatureId::IpFlags => p.ip_flags.into(),
            FeatureId::TcpUrgptr => p.tcp_urgptr.into(),
            _ => unreachable!("flags handled above"),
        }
    }

    /// Stores `value`, saturating into the field's range.
    pub fn set_raw(self, sp: &mut SessionPacket, value: i64) {
        let (lo, hi) = self.storage_range();
        let v = value.clamp(lo, hi);
        let p = &mut sp.packet;
        if let Some(bit) = self.flag_bit() {
            p.tcp_flags.set(bit, v != 0);
            return;
        }
        match self {
            FeatureId::TcpAck => p.tcp_ack = v as u32,
            FeatureId::TcpSeq => p.tcp_seq = v as u32,
            FeatureId::IpChksum => p.ip_chksum = v as u16,
            FeatureId::IpId => p.ip_id = v as u16,
            FeatureId::TcpWindow => p.tcp_window = v as u16,
            FeatureId::TimeSince => sp.time_since_us = v as u64,
            FeatureId::IpLen => p.ip_len = v as u16,
            FeatureId::PayloadSize => p.payload_size = v as u16,
            FeatureId::IpTtl => p.ip_ttl = v as u8,
            FeatureId::IpTos => p.ip_tos = v as u8,
            FeatureId::TcpDataofs => p.tcp_dataofs = v as u8,
            FeatureId::SrcPort => p.src_port = v as u16,
            FeatureId::DstPort => p.dst_port = v as u16,
            FeatureId::IpDirection => sp.ip_direction = Direction::from_bit(v != 0),
            FeatureId::IpVersion => p.ip_version = v as u8,
            FeatureId::IpIhl => p.ip_ihl = v as u8,
            FeatureId::IpProto => p.ip_proto = v as u8,
            FeatureId::IpFrag => p.ip_frag = v as u16,
            FeatureId::IpFlags => p.ip_flags = v as u8,
            FeatureId::TcpUrgptr => p.tcp_urgptr = v as u16,
            _ => unreachable!("flags handled above"),
        }
    }

    /// Kind family this feature is assigned in `mode`, before fitting.
    pub fn planned_kind(self, mode: Mode) -> PlannedKind {
        use FeatureId::*;
        match self {
            TcpAck | TcpSeq | IpChksum | IpId | TcpWindow | TimeSince | IpLen | PayloadSize => PlannedKind::Numeric,
            IpTtl | IpTos | TcpDataofs => match mode {
                Mode::Kal => PlannedKind::OneHot,
                Mode::MseOnly => PlannedKind::Numeric,
            },
            SrcPort | DstPort => match mode {
                Mode::Kal => PlannedKind::Embedded,
                Mode::MseOnly => PlannedKind::Numeric,
            },
            _ => PlannedKind::Binary,
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Schema mode: plain squared error on every feature, or the typed
/// knowledge-augmented encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MseOnly,
    Kal,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::MseOnly => "mse_only",
            Mode::Kal => "kal",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mse_only" | "mse" => Ok(Mode::MseOnly),
            "kal" => Ok(Mode::Kal),
            other => Err(format!("unknown mode `{other}` (expected mse_only or kal)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannedKind {
    Numeric,
    Binary,
    OneHot,
    Embedded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric { min: f64, max: f64 },
    Binary { zero_value: i64, one_value: i64 },
    OneHot { categories: Vec<i64> },
    Embedded { vocabulary: Vec<i64>, embed_dim: usize },
}

impl FeatureKind {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureKind::Numeric { .. } => "numeric",
            FeatureKind::Binary { .. } => "binary",
            FeatureKind::OneHot { .. } => "one_hot",
            FeatureKind::Embedded { .. } => "embedded",
        }
    }

    /// Columns in the encoded session matrix.
    pub fn encoded_width(&self) -> usize {
        match self {
            FeatureKind::OneHot { categories } => categories.len(),
            _ => 1,
        }
    }

    /// Columns the model emits for this feature.
    pub fn output_width(&self) -> usize {
        match self {
            FeatureKind::OneHot { categories } => categories.len(),
            FeatureKind::Embedded { embed_dim, .. } => *embed_dim,
            _ => 1,
        }
    }

    /// Everything except plain numerics counts as categorical.
    pub fn is_categorical(&self) -> bool {
        !matches!(self, FeatureKind::Numeric { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: FeatureId,
    pub kind: FeatureKind,
    /// Column offset in the encoded matrix.
    pub offset: usize,
    /// Column offset in model outputs.
    pub output_offset: usize,
}

impl FeatureSpec {
    pub fn name(&self) -> &'static str {
        self.id.name()
    }

    pub fn width(&self) -> usize {
        self.kind.encoded_width()
    }

    pub fn output_width(&self) -> usize {
        self.kind.output_width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub version: u32,
    pub mode: Mode,
    pub features: Vec<FeatureSpec>,
    pub encoded_width: usize,
    pub output_width: usize,
    /// Sorted port values shared by both port features. Empty in MSE-only mode.
    pub port_vocabulary: Vec<i64>,
    /// Observed cardinalities that contradict the fixed kind assignment.
    #[serde(default)]
    pub audit: Vec<String>,
}

impl FeatureSchema {
    /// Fits encodings on the training sessions.
    ///
    /// Kinds follow the fixed per-mode assignment; a feature observed with a
    /// single value becomes a degenerate binary that always encodes to 0.
    pub fn fit(train: &[Session], mode: Mode) -> Result<Self, FeatureError> {
        let packets: Vec<&SessionPacket> = train.iter().flat_map(|s| &s.packets).collect();
        if packets.is_empty() {
            return Err(FeatureError::EmptyTrainingSet);
        }
        let observed = |id: FeatureId| packets.iter().map(|p| id.raw_value(p)).collect::<BTreeSet<i64>>();

        let port_vocabulary: Vec<i64> = if mode == Mode::Kal {
            let mut v = observed(FeatureId::SrcPort);
            v.extend(observed(FeatureId::DstPort));
            v.into_iter().collect()
        } else {
            Vec::new()
        };

        let mut audit = Vec::new();
        let mut kinds = Vec::with_capacity(FeatureId::ALL.len());
        for id in FeatureId::ALL {
            let values = observed(id);
            let min = *values.first().expect("non-empty");
            let max = *values.last().expect("non-empty");
            let planned = id.planned_kind(mode);
            let kind = if planned == PlannedKind::Embedded {
                FeatureKind::Embedded { vocabulary: port_vocabulary.clone(), embed_dim: DEFAULT_EMBED_DIM }
            } else if values.len() == 1 {
                FeatureKind::Binary { zero_value: min, one_value: min }
            } else {
                match planned {
                    PlannedKind::Numeric => FeatureKind::Numeric { min: min as f64, max: max as f64 },
                    PlannedKind::Binary => {
                        if values.len() > 2 {
                            audit.push(format!(
                                "{id}: {} distinct values for a binary feature; values other than {min} and {max} decode to the nearer one",
                                values.len()
                            ));
                        }
                        FeatureKind::Binary { zero_value: min, one_value: max }
                    }
                    PlannedKind::OneHot => {
                        if values.len() >= ONE_HOT_LIMIT {
                            audit.push(format!("{id}: {} categories for a one-hot feature", values.len()));
                        }
                        FeatureKind::OneHot { categories: values.into_iter().collect() }
                    }
                    PlannedKind::Embedded => unreachable!(),
                }
            };
            kinds.push((id, kind));
        }
        for note in &audit {
            log::warn!("schema audit: {note}");
        }
        Ok(Self::from_kinds(mode, kinds, port_vocabulary, audit))
    }

    fn from_kinds(mode: Mode, kinds: Vec<(FeatureId, FeatureKind)>, port_vocabulary: Vec<i64>, audit: Vec<String>) -> Self {
        let mut offset = 0;
        let mut output_offset = 0;
        let features = kinds
            .into_iter()
            .map(|(id, kind)| {
                let spec = FeatureSpec { id, offset, output_offset, kind };
                offset += spec.width();
                output_offset += spec.output_width();
                spec
            })
            .collect();
        Self { version: SCHEMA_VERSION, mode, features, encoded_width: offset, output_width: output_offset, port_vocabulary, audit }
    }

    pub fn feature(&self, id: FeatureId) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.id == id)
    }

    /// Width of the first embedding among embedded features, if any.
    pub fn embed_dim(&self) -> Option<usize> {
        self.features.iter().find_map(|f| match f.kind {
            FeatureKind::Embedded { embed_dim, .. } => Some(embed_dim),
            _ => None,
        })
    }

    /// Id given to ports missing from the vocabulary.
    pub fn oov_id(&self) -> usize {
        self.port_vocabulary.len()
    }

    /// Checks layout consistency, e.g. after loading from disk.
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.version != SCHEMA_VERSION {
            return Err(FeatureError::UnsupportedVersion(self.version));
        }
        for id in FeatureId::ALL {
            if self.feature(id).is_none() {
                return Err(FeatureError::SchemaMismatch(format!("missing feature {id}")));
            }
        }
        if self.features.len() != FeatureId::ALL.len() {
            return Err(FeatureError::SchemaMismatch("duplicate features".into()));
        }
        let (mut off, mut out) = (0, 0);
        for f in &self.features {
            if f.offset != off || f.output_offset != out {
                return Err(FeatureError::SchemaMismatch(format!("layout gap at {}", f.id)));
            }
            match &f.kind {
                FeatureKind::Numeric { min, max } if min > max => {
                    return Err(FeatureError::SchemaMismatch(format!("{}: min above max", f.id)))
                }
                FeatureKind::OneHot { categories } if categories.is_empty() => {
                    return Err(FeatureError::SchemaMismatch(format!("{}: no categories", f.id)))
                }
                FeatureKind::Embedded { vocabulary, .. } if *vocabulary != self.port_vocabulary => {
                    return Err(FeatureError::SchemaMismatch(format!("{}: vocabulary differs", f.id)))
                }
                _ => {}
            }
            off += f.width();
            out += f.output_width();
        }
        if off != self.encoded_width || out != self.output_width {
            return Err(FeatureError::SchemaMismatch("width totals disagree with layout".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, FeatureError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, FeatureError> {
        let schema: Self = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FeatureError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FeatureError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests;
