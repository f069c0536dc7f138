//! Bidirectional TCP session assembly.
//!
//! Packets sharing a direction-free 5-tuple form one session; there is no
//! timeout or FIN-based splitting. The initiator is whoever sent the first
//! observed packet, which is not necessarily the SYN sender when the capture
//! starts mid-connection.

use std::collections::HashMap;
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::{MacAddr, ParsedPacket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

/// Canonical 5-tuple: the lexicographically smaller endpoint comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub lower: Endpoint,
    pub upper: Endpoint,
    pub protocol: u8,
}

impl SessionKey {
    pub fn new(a: Endpoint, b: Endpoint, protocol: u8) -> Self {
        let (lower, upper) = if a <= b { (a, b) } else { (b, a) };
        Self { lower, upper, protocol }
    }

    pub fn of(packet: &ParsedPacket) -> Self {
        Self::new(
            Endpoint { ip: packet.src_ip, port: packet.src_port },
            Endpoint { ip: packet.dst_ip, port: packet.dst_port },
            packet.ip_proto,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Initiator to responder.
    Forward,
    Reverse,
}

impl Direction {
    pub fn bit(self) -> u8 {
        match self {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        }
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Direction::Reverse
        } else {
            Direction::Forward
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPacket {
    pub packet: ParsedPacket,
    pub ip_direction: Direction,
    /// Microseconds since the session's first packet.
    pub time_since_us: u64,
}

impl SessionPacket {
    /// Seconds since the session's first packet.
    pub fn time_since(&self) -> f64 {
        self.time_since_us as f64 * 1e-6
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    /// Position in assembly order; stable identity for reports.
    pub id: usize,
    pub key: SessionKey,
    pub initiator: Endpoint,
    pub responder: Endpoint,
    pub initiator_mac: MacAddr,
    pub responder_mac: MacAddr,
    /// Capture timestamp of the first packet, in microseconds.
    pub start_us: u64,
    pub packets: Vec<SessionPacket>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }
}

/// Groups packets into sessions ordered by first-packet time.
///
/// Packets are first stably ordered by capture timestamp, so within a session
/// relative times never decrease and ties keep file order.
pub fn group_sessions(packets: &[ParsedPacket]) -> Vec<Session> {
    let mut order: Vec<usize> = (0..packets.len()).collect();
    order.sort_by_key(|&i| packets[i].timestamp_us());

    let mut index: HashMap<SessionKey, usize> = HashMap::new();
    let mut sessions: Vec<Session> = Vec::new();
    for i in order {
        let p = &packets[i];
        let key = SessionKey::of(p);
        let src = Endpoint { ip: p.src_ip, port: p.src_port };
        let slot = *index.entry(key).or_insert_with(|| {
            sessions.push(Session {
                id: sessions.len(),
                key,
                initiator: src,
                responder: Endpoint { ip: p.dst_ip, port: p.dst_port },
                initiator_mac: p.src_mac,
                responder_mac: p.dst_mac,
                start_us: p.timestamp_us(),
                packets: Vec::new(),
            });
            sessions.len() - 1
        });
        let s = &mut sessions[slot];
        let ip_direction = if src == s.initiator { Direction::Forward } else { Direction::Reverse };
        s.packets.push(SessionPacket {
            packet: p.clone(),
            ip_direction,
            time_since_us: p.timestamp_us().saturating_sub(s.start_us),
        });
    }
    sessions
}

#[derive(Debug, Error, PartialEq)]
pub enum SplitError {
    #[error("need at least 2 sessions to split, got {0}")]
    TooFewSessions(usize),
    #[error("train fraction {0} is not in (0, 1)")]
    InvalidFraction(f64),
}

/// Seeded train/validation partition across sessions.
///
/// The train side gets `round(fraction · N)` sessions, adjusted so each side
/// keeps at least one.
pub fn split_sessions(
    sessions: &[Session],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Session>, Vec<Session>), SplitError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(SplitError::InvalidFraction(train_fraction));
    }
    let n = sessions.len();
    if n < 2 {
        return Err(SplitError::TooFewSessions(n));
    }
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, val_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| sessions[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(val_idx)))
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    session: usize,
    index: usize,
    ip_direction: u8,
    time_since: f64,
    #[serde(flatten)]
    packet: &'a ParsedPacket,
}

/// Writes one JSON object per packet, one per line, for inspection.
pub fn write_session_dump(sessions: &[Session], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in sessions {
        for (index, sp) in s.packets.iter().enumerate() {
            let rec = DumpRecord {
                session: s.id,
                index,
                ip_direction: sp.ip_direction.bit(),
                time_since: sp.time_since(),
                packet: &sp.packet,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}
