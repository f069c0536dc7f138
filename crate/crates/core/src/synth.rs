//! Deterministic synthetic TCP captures.
//!
//! Each session is a plausible exchange: a SYN / SYN-ACK / ACK handshake,
//! data and pure-ACK packets with consistent sequence arithmetic, and an
//! optional FIN or RST close. Checksums are valid and timestamps strictly
//! increase within a session. Sessions overlap in time, so the capture is
//! interleaved.

use std::collections::HashSet;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::{MacAddr, ParsedPacket, TcpFlags};
use crate::session::{Direction, Endpoint, SessionPacket};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    ConfigInvalid(String),
    #[error("cannot read generator config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse generator config: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub sessions: usize,
    pub min_packets: usize,
    pub max_packets: usize,
    /// Upper bound on packets per session; `max_packets` may not exceed it.
    pub max_len: usize,
    pub client_ips: usize,
    pub server_ips: usize,
    pub server_ports: Vec<u16>,
    /// Total distinct ports (server ports plus generated client ports).
    pub distinct_ports: usize,
    pub ttls: Vec<u8>,
    pub tos_values: Vec<u8>,
    /// Data offset of SYN-bearing packets; all others use 5.
    pub syn_dataofs: u8,
    pub mean_gap_us: f64,
    pub mean_session_spacing_us: f64,
    pub max_payload: u16,
    pub data_probability: f64,
    pub fin_probability: f64,
    pub rst_probability: f64,
    pub ecn_probability: f64,
    pub start_sec: u32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            sessions: 500,
            min_packets: 3,
            max_packets: 16,
            max_len: 32,
            client_ips: 200,
            server_ips: 8,
            server_ports: vec![22, 25, 80, 110, 143, 443, 3306, 8080],
            distinct_ports: 64,
            ttls: vec![63, 64, 128],
            tos_values: vec![0x00, 0x08, 0x10, 0x28],
            syn_dataofs: 8,
            mean_gap_us: 2_000.0,
            mean_session_spacing_us: 20_000.0,
            max_payload: 1_460,
            data_probability: 0.6,
            fin_probability: 0.7,
            rst_probability: 0.15,
            ecn_probability: 0.2,
            start_sec: 1_700_000_000,
        }
    }
}

impl GeneratorConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Ok(toml::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.to_string()));
        if self.sessions == 0 {
            return bad("sessions must be positive");
        }
        if self.min_packets == 0 || self.min_packets > self.max_packets {
            return bad("need 1 <= min_packets <= max_packets");
        }
        if self.max_packets > self.max_len {
            return bad("max_packets exceeds max_len");
        }
        if self.client_ips == 0 || self.client_ips > 65_536 || self.server_ips == 0 || self.server_ips > 254 {
            return bad("ip pool sizes out of range");
        }
        let servers: HashSet<u16> = self.server_ports.iter().copied().collect();
        if servers.is_empty() || servers.len() != self.server_ports.len() {
            return bad("server_ports must be non-empty and distinct");
        }
        if servers.iter().any(|p| (32_768..61_000).contains(p)) {
            return bad("server_ports overlap the ephemeral client range");
        }
        if self.distinct_ports <= servers.len() || self.distinct_ports - servers.len() > 28_232 {
            return bad("distinct_ports must exceed the server port count");
        }
        if self.ttls.is_empty() || self.tos_values.is_empty() {
            return bad("ttls and tos_values must be non-empty");
        }
        if !(5..=15).contains(&self.syn_dataofs) {
            return bad("syn_dataofs outside 5..=15");
        }
        if self.max_payload == 0 || usize::from(self.max_payload) > 65_535 - 120 {
            return bad("max_payload out of range");
        }
        for (name, p) in [
            ("data_probability", self.data_probability),
            ("fin_probability", self.fin_probability),
            ("rst_probability", self.rst_probability),
            ("ecn_probability", self.ecn_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::ConfigInvalid(format!("{name} not in [0, 1]")));
            }
        }
        if !(self.mean_gap_us >= 1.0 && self.mean_session_spacing_us >= 0.0) {
            return bad("timing means out of range");
        }
        Ok(())
    }
}

fn mac_for(ip: Ipv4Addr) -> MacAddr {
    let o = ip.octets();
    MacAddr([0x02, 0x00, o[0], o[1], o[2], o[3]])
}

/// Builds a single consistent packet; checksums and `ip_len` are derived.
#[derive(Debug, Clone)]
pub struct PacketBuilder {
    p: ParsedPacket,
}

impl PacketBuilder {
    pub fn new(src: Endpoint, dst: Endpoint) -> Self {
        Self {
            p: ParsedPacket {
                ts_sec: 0,
                ts_usec: 0,
                src_mac: mac_for(src.ip),
                dst_mac: mac_for(dst.ip),
                ip_version: 4,
                ip_ihl: 5,
                ip_tos: 0,
                ip_len: 0,
                ip_id: 1,
                ip_flags: 2,
                ip_frag: 0,
                ip_ttl: 64,
                ip_proto: 6,
                ip_chksum: 0,
                src_ip: src.ip,
                dst_ip: dst.ip,
                src_port: src.port,
                dst_port: dst.port,
                tcp_seq: 0,
                tcp_ack: 0,
                tcp_dataofs: 5,
                tcp_flags: TcpFlags(TcpFlags::ACK),
                tcp_window: 65_535,
                tcp_chksum: 0,
                tcp_urgptr: 0,
                payload_size: 0,
            },
        }
    }

    pub fn at(mut self, sec: u32, usec: u32) -> Self {
        self.p.ts_sec = sec;
        self.p.ts_usec = usec;
        self
    }

    pub fn at_us(self, us: u64) -> Self {
        self.at((us / 1_000_000) as u32, (us % 1_000_000) as u32)
    }

    pub fn flags(mut self, bits: u8) -> Self {
        self.p.tcp_flags = TcpFlags(bits);
        self
    }

    pub fn seq(mut self, seq: u32) -> Self {
        self.p.tcp_seq = seq;
        self
    }

    pub fn ack(mut self, ack: u32) -> Self {
        self.p.tcp_ack = ack;
        self
    }

    pub fn payload(mut self, bytes: u16) -> Self {
        self.p.payload_size = bytes;
        self
    }

    pub fn ttl(mut self, ttl: u8) -> Self {
        self.p.ip_ttl = ttl;
        self
    }

    pub fn tos(mut self, tos: u8) -> Self {
        self.p.ip_tos = tos;
        self
    }

    pub fn dataofs(mut self, words: u8) -> Self {
        self.p.tcp_dataofs = words;
        self
    }

    pub fn window(mut self, window: u16) -> Self {
        self.p.tcp_window = window;
        self
    }

    pub fn ip_id(mut self, id: u16) -> Self {
        self.p.ip_id = id;
        self
    }

    pub fn build(mut self) -> ParsedPacket {
        self.p.ip_len = self.p.expected_ip_len() as u16;
        self.p.ip_chksum = self.p.compute_ip_checksum();
        self.p.tcp_chksum = self.p.compute_tcp_checksum();
        self.p
    }
}

struct Side {
    ep: Endpoint,
    next_seq: u32,
    ip_id: u16,
    ttl: u8,
    window: u16,
}

#[derive(Clone, Copy, PartialEq)]
enum Who {
    Client,
    Server,
}

struct SessionPlan {
    client: Endpoint,
    server: Endpoint,
    start_us: u64,
    n_packets: usize,
}

fn exp_sample(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    -mean * u.ln()
}

fn build_session(cfg: &GeneratorConfig, plan: &SessionPlan, rng: &mut ChaCha8Rng) -> Vec<ParsedPacket> {
    const WINDOWS: [u16; 5] = [8_192, 16_384, 29_200, 64_240, 65_535];
    let mut client = Side {
        ep: plan.client,
        next_seq: rng.gen(),
        ip_id: rng.gen(),
        ttl: *cfg.ttls.choose(rng).unwrap(),
        window: *WINDOWS.choose(rng).unwrap(),
    };
    let mut server = Side {
        ep: plan.server,
        next_seq: rng.gen(),
        ip_id: rng.gen(),
        ttl: *cfg.ttls.choose(rng).unwrap(),
        window: *WINDOWS.choose(rng).unwrap(),
    };
    let tos = *cfg.tos_values.choose(rng).unwrap();
    let ecn = rng.gen_bool(cfg.ecn_probability);
    let n = plan.n_packets;

    // (sender, flags, payload)
    let mut script: Vec<(Who, u8, u16)> = Vec::with_capacity(n);
    let syn = TcpFlags::SYN | if ecn { TcpFlags::ECE | TcpFlags::CWR } else { 0 };
    script.push((Who::Client, syn, 0));
    if n >= 2 {
        let syn_ack = TcpFlags::SYN | TcpFlags::ACK | if ecn { TcpFlags::ECE } else { 0 };
        script.push((Who::Server, syn_ack, 0));
    }
    if n >= 3 {
        script.push((Who::Client, TcpFlags::ACK, 0));
    }
    let mut tail: Vec<(Who, u8, u16)> = Vec::new();
    if n >= 6 && rng.gen_bool(cfg.fin_probability) {
        let first = if rng.gen_bool(0.5) { Who::Client } else { Who::Server };
        let second = if first == Who::Client { Who::Server } else { Who::Client };
        tail.push((first, TcpFlags::FIN | TcpFlags::ACK, 0));
        tail.push((second, TcpFlags::FIN | TcpFlags::ACK, 0));
        tail.push((first, TcpFlags::ACK, 0));
    } else if n >= 4 && rng.gen_bool(cfg.rst_probability) {
        let who = if rng.gen_bool(0.5) { Who::Client } else { Who::Server };
        tail.push((who, TcpFlags::RST | TcpFlags::ACK, 0));
    }
    while script.len() + tail.len() < n {
        let who = if rng.gen_bool(0.5) { Who::Client } else { Who::Server };
        if rng.gen_bool(cfg.data_probability) {
            let payload = rng.gen_range(1..=cfg.max_payload);
            script.push((who, TcpFlags::PSH | TcpFlags::ACK, payload));
        } else {
            script.push((who, TcpFlags::ACK, 0));
        }
    }
    script.extend(tail);

    let mut t = plan.start_us;
    let mut out = Vec::with_capacity(n);
    for (i, (who, flags, payload)) in script.into_iter().enumerate() {
        if i > 0 {
            t += 1 + exp_sample(rng, cfg.mean_gap_us) as u64;
        }
        let (me, peer) = match who {
            Who::Client => (&mut client, &mut server),
            Who::Server => (&mut server, &mut client),
        };
        let f = TcpFlags(flags);
        let ack = if f.contains(TcpFlags::ACK) { peer.next_seq } else { 0 };
        let jitter = rng.gen_range(0..=1024u16);
        let packet = PacketBuilder::new(me.ep, peer.ep)
            .at_us(t)
            .flags(flags)
            .seq(me.next_seq)
            .ack(ack)
            .payload(payload)
            .ttl(me.ttl)
            .tos(tos)
            .dataofs(if f.contains(TcpFlags::SYN) { cfg.syn_dataofs } else { 5 })
            .window(me.window.saturating_sub(jitter))
            .ip_id(me.ip_id)
            .build();
        let consumed = u32::from(payload)
            + u32::from(f.contains(TcpFlags::SYN))
            + u32::from(f.contains(TcpFlags::FIN));
        me.next_seq = me.next_seq.wrapping_add(consumed);
        me.ip_id = me.ip_id.wrapping_add(1);
        out.push(packet);
    }
    out
}

/// Generates a full capture, packets sorted by timestamp.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<ParsedPacket>, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_clients = cfg.distinct_ports - cfg.server_ports.len();
    let mut ephemeral: Vec<u16> = (32_768..61_000).collect();
    ephemeral.shuffle(&mut rng);
    let client_ports = &ephemeral[..n_clients];

    let client_ip = |i: usize| Ipv4Addr::new(10, 0, (i >> 8) as u8, (i & 0xff) as u8);
    let server_ip = |i: usize| Ipv4Addr::new(192, 168, 1, 1 + i as u8);

    let mut seen = HashSet::new();
    let mut plans = Vec::with_capacity(cfg.sessions);
    let mut start = u64::from(cfg.start_sec) * 1_000_000;
    for i in 0..cfg.sessions {
        // the first sessions walk the port pools so every port is used
        let client_port =
            if i < n_clients { client_ports[i] } else { *client_ports.choose(&mut rng).unwrap() };
        let server_port = if i < cfg.server_ports.len() {
            cfg.server_ports[i]
        } else {
            *cfg.server_ports.choose(&mut rng).unwrap()
        };
        let mut tuple = None;
        for _ in 0..1_000 {
            let c = Endpoint { ip: client_ip(rng.gen_range(0..cfg.client_ips)), port: client_port };
            let s = Endpoint { ip: server_ip(rng.gen_range(0..cfg.server_ips)), port: server_port };
            if seen.insert((c, s)) {
                tuple = Some((c, s));
                break;
            }
        }
        let (client, server) = tuple
            .ok_or_else(|| SynthError::ConfigInvalid("endpoint pools too small for unique tuples".into()))?;
        let n_packets = rng.gen_range(cfg.min_packets..=cfg.max_packets);
        plans.push(SessionPlan { client, server, start_us: start, n_packets });
        start += 1 + exp_sample(&mut rng, cfg.mean_session_spacing_us) as u64;
    }

    let mut packets = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(i as u64 + 1);
        packets.extend(build_session(cfg, plan, &mut srng));
    }
    packets.sort_by_key(|p| p.timestamp_us());
    Ok(packets)
}

/// A session shaped like raw decoder output: either every field drawn
/// uniformly over its type, or a clean exchange with a few fields corrupted.
/// Used to exercise constraint enforcement.
pub fn adversarial_session(seed: u64, len: usize) -> Vec<SessionPacket> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wild = rng.gen_bool(0.5);
    let client = Endpoint { ip: Ipv4Addr::from(rng.gen::<u32>()), port: rng.gen() };
    let server = Endpoint { ip: Ipv4Addr::from(rng.gen::<u32>()), port: rng.gen() };
    let start = if rng.gen_bool(0.1) { u64::from(u32::MAX) * 1_000_000 } else { rng.gen_range(0..4_000_000_000_000u64) };
    let mut t = 0u64;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let dir = if rng.gen_bool(0.5) { Direction::Forward } else { Direction::Reverse };
        let (src, dst) = if dir == Direction::Forward { (client, server) } else { (server, client) };
        t += rng.gen_range(0..5_000u64);
        let flags = if i == 0 { TcpFlags::SYN } else { TcpFlags::ACK };
        let mut sp = SessionPacket {
            packet: PacketBuilder::new(src, dst).at_us(start + t).flags(flags).payload(rng.gen_range(0..1500)).build(),
            ip_direction: dir,
            time_since_us: t,
        };
        let corruptions = if wild { 32 } else { rng.gen_range(0..4) };
        for _ in 0..corruptions {
            corrupt(&mut sp, &mut rng);
        }
        out.push(sp);
    }
    out
}

fn corrupt(sp: &mut SessionPacket, rng: &mut ChaCha8Rng) {
    let p = &mut sp.packet;
    match rng.gen_range(0..24) {
        0 => sp.time_since_us = rng.gen(),
        1 => sp.time_since_us = rng.gen_range(0..10_000),
        2 => p.ts_sec = rng.gen(),
        3 => p.ts_usec = rng.gen(),
        4 => p.ip_version = rng.gen(),
        5 => p.ip_ihl = rng.gen(),
        6 => p.tcp_dataofs = rng.gen(),
        7 => p.ip_len = rng.gen(),
        8 => p.payload_size = rng.gen(),
        9 => p.ip_chksum = rng.gen(),
        10 => p.ip_flags = rng.gen(),
        11 => p.ip_frag = rng.gen(),
        12 => p.ip_proto = rng.gen(),
        13 => p.tcp_flags = TcpFlags(rng.gen()),
        14 => p.tcp_urgptr = rng.gen(),
        15 => p.src_port = rng.gen(),
        16 => p.dst_port = rng.gen(),
        17 => p.src_ip = Ipv4Addr::from(rng.gen::<u32>()),
        18 => p.dst_ip = Ipv4Addr::from(rng.gen::<u32>()),
        19 => sp.ip_direction = if rng.gen_bool(0.5) { Direction::Forward } else { Direction::Reverse },
        20 => p.ip_ttl = rng.gen(),
        21 => p.ip_tos = rng.gen(),
        22 => p.tcp_seq = rng.gen(),
        _ => p.ip_id = rng.gen(),
    }
}
