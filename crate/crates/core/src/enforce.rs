//! Protocol rule checking and repair for decoded sessions.
//!
//! Rules, in the order repairs are applied:
//!
//! | id  | predicate                                                        |
//! |-----|------------------------------------------------------------------|
//! | R6  | sub-byte fields fit their width; ihl and dataofs in 5..=15; usec < 1e6 |
//! | R1  | time_since starts at 0, never decreases, matches capture timestamps |
//! | R2  | ip_version = 4                                                   |
//! | R3  | ip_proto = 6                                                     |
//! | R10 | every packet names the same initiator and responder endpoints    |
//! | R4  | ip_len = 4·ihl + 4·dataofs + payload_size                        |
//! | R5  | ip_chksum is the header checksum                                 |
//! | R7  | no SYN with FIN, no SYN with RST                                 |
//! | R8  | tcp_urgptr ≠ 0 only with URG                                     |
//! | R9  | first packet carries SYN (report only)                           |
//!
//! R6 runs first because R4 and R5 read the fields it clamps. R10 runs before
//! R5 since the checksum covers the addresses.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pcap::TcpFlags;
use crate::session::{Direction, Endpoint, SessionPacket};

#[derive(Debug, Error)]
pub enum EnforceError {
    #[error("unknown rule id {0:?}")]
    UnknownRule(String),
    #[error("rule {0} listed twice")]
    DuplicateRule(RuleId),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    R1,
    R2,
    R3,
    R4,
    R5,
    R6,
    R7,
    R8,
    R9,
    R10,
}

impl RuleId {
    pub const ALL: [RuleId; 10] = [
        RuleId::R1,
        RuleId::R2,
        RuleId::R3,
        RuleId::R4,
        RuleId::R5,
        RuleId::R6,
        RuleId::R7,
        RuleId::R8,
        RuleId::R9,
        RuleId::R10,
    ];

    /// Repair order.
    pub const ORDER: [RuleId; 10] = [
        RuleId::R6,
        RuleId::R1,
        RuleId::R2,
        RuleId::R3,
        RuleId::R10,
        RuleId::R4,
        RuleId::R5,
        RuleId::R7,
        RuleId::R8,
        RuleId::R9,
    ];

    pub fn description(self) -> &'static str {
        match self {
            RuleId::R1 => "time_since starts at zero, is non-decreasing and agrees with capture timestamps",
            RuleId::R2 => "ip_version is 4",
            RuleId::R3 => "ip_proto is TCP (6)",
            RuleId::R4 => "ip_len equals 4*ihl + 4*dataofs + payload_size",
            RuleId::R5 => "ip_chksum equals the recomputed header checksum",
            RuleId::R6 => "fields fit their bit widths; ihl and dataofs within 5..=15",
            RuleId::R7 => "SYN never combined with FIN or RST",
            RuleId::R8 => "nonzero tcp_urgptr requires URG",
            RuleId::R9 => "first packet of the session carries SYN",
            RuleId::R10 => "all packets agree on the initiator and responder endpoints",
        }
    }

    pub fn default_severity(self) -> Severity {
        match self {
            RuleId::R9 => Severity::ReportOnly,
            _ => Severity::Repairable,
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for RuleId {
    type Err = EnforceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RuleId::ALL
            .into_iter()
            .find(|r| r.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| EnforceError::UnknownRule(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Repairable,
    ReportOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub id: RuleId,
    pub severity: Severity,
    pub enabled: bool,
}

impl Rule {
    pub fn description(&self) -> &'static str {
        self.id.description()
    }
}

/// Ordered rule set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    rules: Vec<Rule>,
}

impl Default for ConstraintSpec {
    fn default() -> Self {
        let rules = RuleId::ORDER
            .into_iter()
            .map(|id| Rule { id, severity: id.default_severity(), enabled: true })
            .collect();
        Self { rules }
    }
}

impl ConstraintSpec {
    /// Default rules with the listed ids switched off.
    pub fn without<S: AsRef<str>>(disabled: &[S]) -> Result<Self, EnforceError> {
        let mut spec = Self::default();
        let mut seen = Vec::new();
        for name in disabled {
            let id: RuleId = name.as_ref().parse()?;
            if seen.contains(&id) {
                return Err(EnforceError::DuplicateRule(id));
            }
            seen.push(id);
            spec.rules.iter_mut().filter(|r| r.id == id).for_each(|r| r.enabled = false);
        }
        Ok(spec)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn is_enabled(&self, id: RuleId) -> bool {
        self.rules.iter().any(|r| r.id == id && r.enabled)
    }

    fn active(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().filter(|r| r.enabled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: RuleId,
    pub severity: Severity,
    pub packet: usize,
    pub observed: String,
    /// `None` when not repaired (validation, or a report-only rule).
    pub repaired: Option<String>,
}

/// Largest time_since that still fits the capture timestamp of a session
/// starting at `start_us`.
fn max_offset(start_us: u64) -> u64 {
    let max_ts = u64::from(u32::MAX) * 1_000_000 + 999_999;
    max_ts.saturating_sub(start_us)
}

fn set_timestamp(sp: &mut SessionPacket, us: u64) {
    sp.packet.ts_sec = (us / 1_000_000).min(u64::from(u32::MAX)) as u32;
    sp.packet.ts_usec = (us % 1_000_000) as u32;
}

fn endpoints(sp: &SessionPacket) -> (Endpoint, Endpoint) {
    let p = &sp.packet;
    let src = Endpoint { ip: p.src_ip, port: p.src_port };
    let dst = Endpoint { ip: p.dst_ip, port: p.dst_port };
    match sp.ip_direction {
        Direction::Forward => (src, dst),
        Direction::Reverse => (dst, src),
    }
}

/// Most frequent (initiator, responder) pair; ties go to the earliest seen.
fn majority_endpoints(packets: &[SessionPacket]) -> Option<(Endpoint, Endpoint)> {
    let mut counts: HashMap<(Endpoint, Endpoint), (usize, usize)> = HashMap::new();
    for (i, sp) in packets.iter().enumerate() {
        counts.entry(endpoints(sp)).or_insert((0, i)).0 += 1;
    }
    counts.into_iter().max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))).map(|(k, _)| k)
}

fn fmt_pair((a, b): (Endpoint, Endpoint)) -> String {
    format!("{}:{} <-> {}:{}", a.ip, a.port, b.ip, b.port)
}

fn range_problems(sp: &SessionPacket) -> Vec<String> {
    let p = &sp.packet;
    let mut out = Vec::new();
    if p.ip_version > 0xf {
        out.push(format!("ip_version={}", p.ip_version));
    }
    if !(5..=15).contains(&p.ip_ihl) {
        out.push(format!("ip_ihl={}", p.ip_ihl));
    }
    if !(5..=15).contains(&p.tcp_dataofs) {
        out.push(format!("tcp_dataofs={}", p.tcp_dataofs));
    }
    if p.ip_flags > 0x7 {
        out.push(format!("ip_flags={}", p.ip_flags));
    }
    if p.ip_frag > 0x1fff {
        out.push(format!("ip_frag={}", p.ip_frag));
    }
    if p.ts_usec >= 1_000_000 {
        out.push(format!("ts_usec={}", p.ts_usec));
    }
    out
}

fn clamp_ranges(sp: &mut SessionPacket) {
    let p = &mut sp.packet;
    p.ip_version = p.ip_version.min(0xf);
    p.ip_ihl = p.ip_ihl.clamp(5, 15);
    p.tcp_dataofs = p.tcp_dataofs.clamp(5, 15);
    p.ip_flags = p.ip_flags.min(0x7);
    p.ip_frag = p.ip_frag.min(0x1fff);
    p.ts_usec = p.ts_usec.min(999_999);
}

/// Runs one rule over `packets`, repairing in place when `repair` is set.
fn apply(rule: &Rule, packets: &mut [SessionPacket], repair: bool) -> Vec<Violation> {
    let repair = repair && rule.severity == Severity::Repairable;
    let mut out = Vec::new();
    let mut record = |packet: usize, observed: String, repaired: Option<String>| {
        out.push(Violation { rule: rule.id, severity: rule.severity, packet, observed, repaired });
    };
    match rule.id {
        RuleId::R1 => {
            let Some(first) = packets.first() else { return out };
            let start = first.packet.timestamp_us().saturating_sub(first.time_since_us);
            let limit = max_offset(start);
            let mut running = 0u64;
            for (i, sp) in packets.iter_mut().enumerate() {
                let t = sp.time_since_us;
                let want = if i == 0 { 0 } else { t.max(running).min(limit) };
                let ts = sp.packet.timestamp_us();
                if t != want || ts != start + want {
                    let observed = format!("time_since_us={t} ts_us={ts}");
                    let fixed = repair.then(|| {
                        sp.time_since_us = want;
                        set_timestamp(sp, start + want);
                        format!("time_since_us={want} ts_us={}", start + want)
                    });
                    record(i, observed, fixed);
                }
                running = if repair { want } else { want.max(t) };
            }
        }
        RuleId::R2 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                if sp.packet.ip_version != 4 {
                    let observed = format!("ip_version={}", sp.packet.ip_version);
                    let fixed = repair.then(|| {
                        sp.packet.ip_version = 4;
                        "ip_version=4".to_string()
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R3 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                if sp.packet.ip_proto != crate::pcap::IP_PROTO_TCP {
                    let observed = format!("ip_proto={}", sp.packet.ip_proto);
                    let fixed = repair.then(|| {
                        sp.packet.ip_proto = crate::pcap::IP_PROTO_TCP;
                        "ip_proto=6".to_string()
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R4 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                let p = &mut sp.packet;
                if u32::from(p.ip_len) != p.expected_ip_len() {
                    let observed = format!("ip_len={} payload_size={}", p.ip_len, p.payload_size);
                    let fixed = repair.then(|| {
                        let headers = p.expected_ip_len() - u32::from(p.payload_size);
                        let room = u32::from(u16::MAX).saturating_sub(headers);
                        p.payload_size = p.payload_size.min(room as u16);
                        p.ip_len = p.expected_ip_len().min(u32::from(u16::MAX)) as u16;
                        format!("ip_len={} payload_size={}", p.ip_len, p.payload_size)
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R5 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                let want = sp.packet.compute_ip_checksum();
                if sp.packet.ip_chksum != want {
                    let observed = format!("ip_chksum={:#06x}", sp.packet.ip_chksum);
                    let fixed = repair.then(|| {
                        sp.packet.ip_chksum = want;
                        format!("ip_chksum={want:#06x}")
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R6 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                let problems = range_problems(sp);
                if !problems.is_empty() {
                    let fixed = repair.then(|| {
                        clamp_ranges(sp);
                        format!(
                            "ip_version={} ip_ihl={} tcp_dataofs={} ip_flags={} ip_frag={} ts_usec={}",
                            sp.packet.ip_version,
                            sp.packet.ip_ihl,
                            sp.packet.tcp_dataofs,
                            sp.packet.ip_flags,
                            sp.packet.ip_frag,
                            sp.packet.ts_usec
                        )
                    });
                    record(i, problems.join(" "), fixed);
                }
            }
        }
        RuleId::R7 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                let f = &mut sp.packet.tcp_flags;
                let syn = f.contains(TcpFlags::SYN);
                if syn && (f.contains(TcpFlags::FIN) || f.contains(TcpFlags::RST)) {
                    let observed = format!("tcp_flags={:#04x}", f.0);
                    let fixed = repair.then(|| {
                        f.set(TcpFlags::FIN, false);
                        f.set(TcpFlags::RST, false);
                        format!("tcp_flags={:#04x}", f.0)
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R8 => {
            for (i, sp) in packets.iter_mut().enumerate() {
                let p = &mut sp.packet;
                if p.tcp_urgptr != 0 && !p.tcp_flags.contains(TcpFlags::URG) {
                    let observed = format!("tcp_urgptr={}", p.tcp_urgptr);
                    let fixed = repair.then(|| {
                        p.tcp_urgptr = 0;
                        "tcp_urgptr=0".to_string()
                    });
                    record(i, observed, fixed);
                }
            }
        }
        RuleId::R9 => {
            if let Some(first) = packets.first() {
                if !first.packet.tcp_flags.contains(TcpFlags::SYN) {
                    record(0, format!("tcp_flags={:#04x}", first.packet.tcp_flags.0), None);
                }
            }
        }
        RuleId::R10 => {
            let Some(pair) = majority_endpoints(packets) else { return out };
            for (i, sp) in packets.iter_mut().enumerate() {
                let seen = endpoints(sp);
                if seen != pair {
                    let fixed = repair.then(|| {
                        let (src, dst) = match sp.ip_direction {
                            Direction::Forward => (pair.0, pair.1),
                            Direction::Reverse => (pair.1, pair.0),
                        };
                        let p = &mut sp.packet;
                        p.src_ip = src.ip;
                        p.src_port = src.port;
                        p.dst_ip = dst.ip;
                        p.dst_port = dst.port;
                        fmt_pair(pair)
                    });
                    record(i, fmt_pair(seen), fixed);
                }
            }
        }
    }
    out
}

/// Every enabled rule's violations, without touching the session.
pub fn validate(packets: &[SessionPacket], spec: &ConstraintSpec) -> Vec<Violation> {
    let mut scratch = packets.to_vec();
    spec.active().flat_map(|r| apply(r, &mut scratch, false)).collect()
}

/// Repairs `packets` rule by rule and returns the result with every violation
/// met along the way.
pub fn enforce(packets: &[SessionPacket], spec: &ConstraintSpec) -> (Vec<SessionPacket>, Vec<Violation>) {
    let mut out = packets.to_vec();
    let mut violations = Vec::new();
    for rule in spec.active() {
        violations.extend(apply(rule, &mut out, true));
    }
    (out, violations)
}

/// Counts violations that a repair would have fixed.
pub fn repairable_count(violations: &[Violation]) -> usize {
    violations.iter().filter(|v| v.severity == Severity::Repairable).count()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    rule: RuleId,
    severity: Severity,
    session_id: usize,
    packet: usize,
    before: &'a str,
    after: &'a str,
}

/// Writes `rule,severity,session_id,packet,before,after` rows.
pub fn write_violations_csv<W: Write>(out: W, rows: &[(usize, Violation)]) -> Result<(), EnforceError> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["rule", "severity", "session_id", "packet", "before", "after"])?;
    }
    for (session_id, v) in rows {
        w.serialize(CsvRow {
            rule: v.rule,
            severity: v.severity,
            session_id: *session_id,
            packet: v.packet,
            before: &v.observed,
            after: v.repaired.as_deref().unwrap_or(""),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_violations_csv(path: impl AsRef<Path>, rows: &[(usize, Violation)]) -> Result<(), EnforceError> {
    write_violations_csv(std::fs::File::create(path)?, rows)
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use proptest::prelude::*;

    use super::*;
    use crate::pcap::ipv4_header_checksum;
    use crate::session::group_sessions;
    use crate::synth::{adversarial_session, generate, GeneratorConfig, PacketBuilder};

    fn ep(last: u8, port: u16) -> Endpoint {
        Endpoint { ip: Ipv4Addr::new(10, 0, 0, last), port }
    }

    fn corpus(n: usize) -> Vec<Vec<SessionPacket>> {
        let cfg = GeneratorConfig { sessions: n, seed: 4, ..GeneratorConfig::default() };
        group_sessions(&generate(&cfg).unwrap()).into_iter().map(|s| s.packets).collect()
    }

    fn timed(times: &[u64]) -> Vec<SessionPacket> {
        let pkts: Vec<_> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let flags = if i == 0 { TcpFlags::SYN } else { TcpFlags::ACK };
                PacketBuilder::new(ep(1, 4000), ep(2, 80)).at_us(1_000_000 + t).flags(flags).build()
            })
            .collect();
        // group_sessions sorts by time, so lay the session out by hand.
        pkts.into_iter()
            .zip(times)
            .map(|(packet, &t)| SessionPacket { packet, ip_direction: Direction::Forward, time_since_us: t })
            .collect()
    }

    #[test]
    fn generated_sessions_are_clean() {
        for s in corpus(50) {
            assert_eq!(validate(&s, &ConstraintSpec::default()), vec![]);
        }
    }

    #[test]
    fn syn_fin_is_one_r7_violation() {
        let mut s = corpus(1).remove(0);
        s[1].packet.tcp_flags = TcpFlags(TcpFlags::SYN | TcpFlags::FIN);
        let v = validate(&s, &ConstraintSpec::default());
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule, v[0].packet), (RuleId::R7, 1));
        let (fixed, _) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(fixed[1].packet.tcp_flags, TcpFlags(TcpFlags::SYN));
        let mut r = corpus(1).remove(0);
        r[0].packet.tcp_flags = TcpFlags(TcpFlags::SYN | TcpFlags::RST);
        let (fixed, _) = enforce(&r, &ConstraintSpec::default());
        assert_eq!(fixed[0].packet.tcp_flags, TcpFlags(TcpFlags::SYN));
    }

    #[test]
    fn decreasing_time_is_repaired_by_running_max() {
        let s = timed(&[0, 2000, 1000]);
        let v = validate(&s, &ConstraintSpec::default());
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule, v[0].packet), (RuleId::R1, 2));
        let (fixed, found) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(found.len(), 1);
        let times: Vec<u64> = fixed.iter().map(|p| p.time_since_us).collect();
        assert_eq!(times, vec![0, 2000, 2000]);
        assert_eq!(fixed[2].packet.timestamp_us(), 1_002_000);
    }

    #[test]
    fn nonzero_first_offset_is_reset() {
        let mut s = timed(&[0, 10, 20]);
        s[0].time_since_us = 7;
        let (fixed, _) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(fixed[0].time_since_us, 0);
        assert!(validate(&fixed, &ConstraintSpec::default()).is_empty());
    }

    #[test]
    fn ip_len_repair_example() {
        let mut s = corpus(1).remove(0);
        let p = &mut s[2].packet;
        p.ip_ihl = 5;
        p.tcp_dataofs = 5;
        p.payload_size = 100;
        p.ip_len = 173;
        let (fixed, v) = enforce(&s, &ConstraintSpec::default());
        let q = &fixed[2].packet;
        assert_eq!(q.ip_len, 140);
        // Independent oracle: checksum over the header bytes with the field zeroed.
        let mut hdr = q.ip_header_bytes();
        hdr[10] = 0;
        hdr[11] = 0;
        assert_eq!(q.ip_chksum, ipv4_header_checksum(&hdr).unwrap());
        let rules: Vec<RuleId> = v.iter().map(|v| v.rule).collect();
        assert!(rules.contains(&RuleId::R4) && rules.contains(&RuleId::R5));
        // Minimality: nothing outside the length and checksum moved.
        let mut expect = s[2].clone();
        expect.packet.ip_len = 140;
        expect.packet.ip_chksum = q.ip_chksum;
        assert_eq!(fixed[2], expect);
    }

    #[test]
    fn oversized_length_gives_up_payload() {
        let mut s = corpus(1).remove(0);
        s[0].packet.ip_ihl = 15;
        s[0].packet.tcp_dataofs = 15;
        s[0].packet.payload_size = u16::MAX;
        let (fixed, _) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(fixed[0].packet.ip_len, u16::MAX);
        assert_eq!(fixed[0].packet.payload_size, u16::MAX - 120);
    }

    #[test]
    fn urgent_pointer_and_constants() {
        let mut s = corpus(1).remove(0);
        s[1].packet.tcp_urgptr = 9;
        s[1].packet.ip_version = 6;
        s[1].packet.ip_proto = 17;
        let (fixed, v) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(fixed[1].packet.tcp_urgptr, 0);
        assert_eq!(fixed[1].packet.ip_version, 4);
        assert_eq!(fixed[1].packet.ip_proto, 6);
        assert!(v.iter().any(|v| v.rule == RuleId::R8));
        let mut u = corpus(1).remove(0);
        u[1].packet.tcp_urgptr = 9;
        u[1].packet.tcp_flags.set(TcpFlags::URG, true);
        assert!(validate(&u, &ConstraintSpec::default()).is_empty());
    }

    #[test]
    fn missing_syn_is_reported_not_repaired() {
        let mut s = corpus(1).remove(0);
        s[0].packet.tcp_flags = TcpFlags(TcpFlags::ACK);
        let (fixed, v) = enforce(&s, &ConstraintSpec::default());
        assert_eq!(fixed, s);
        assert_eq!(v.len(), 1);
        assert_eq!((v[0].rule, v[0].severity, v[0].repaired.clone()), (RuleId::R9, Severity::ReportOnly, None));
        assert_eq!(repairable_count(&v), 0);
    }

    #[test]
    fn stray_port_follows_the_majority() {
        let mut s = corpus(1).remove(0);
        let want = (s[1].packet.src_port, s[1].packet.dst_port);
        s[1].packet.src_port = 1;
        let (fixed, v) = enforce(&s, &ConstraintSpec::default());
        assert_eq!((fixed[1].packet.src_port, fixed[1].packet.dst_port), want);
        assert_eq!(v.iter().filter(|v| v.rule == RuleId::R10).count(), 1);
    }

    #[test]
    fn disabled_rules_are_skipped() {
        let mut s = corpus(1).remove(0);
        s[0].packet.tcp_urgptr = 5;
        let spec = ConstraintSpec::without(&["r8"]).unwrap();
        assert!(!spec.is_enabled(RuleId::R8));
        assert!(validate(&s, &spec).is_empty());
        assert_eq!(enforce(&s, &spec).0, s);
        assert!(matches!(ConstraintSpec::without(&["R11"]), Err(EnforceError::UnknownRule(_))));
        assert!(matches!(ConstraintSpec::without(&["R2", "r2"]), Err(EnforceError::DuplicateRule(RuleId::R2))));
    }

    #[test]
    fn empty_session_is_fine() {
        assert!(validate(&[], &ConstraintSpec::default()).is_empty());
        assert!(enforce(&[], &ConstraintSpec::default()).0.is_empty());
    }

    #[test]
    fn default_spec_shape() {
        let spec = ConstraintSpec::default();
        let ids: Vec<RuleId> = spec.rules().iter().map(|r| r.id).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), ids.len());
        let pos = |id| ids.iter().position(|&r| r == id).unwrap();
        assert!(pos(RuleId::R6) < pos(RuleId::R4));
        assert!(pos(RuleId::R4) < pos(RuleId::R5));
        assert!(pos(RuleId::R10) < pos(RuleId::R5));
    }

    #[test]
    fn csv_layout() {
        let mut s = corpus(1).remove(0);
        s[1].packet.ip_len = 1;
        let (_, v) = enforce(&s, &ConstraintSpec::default());
        let rows: Vec<(usize, Violation)> = v.into_iter().map(|v| (3, v)).collect();
        let mut buf = Vec::new();
        write_violations_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rule,severity,session_id,packet,before,after");
        assert_eq!(lines.len(), rows.len() + 1);
        assert!(lines[1].starts_with("R4,Repairable,3,1,"));
        let mut empty = Vec::new();
        write_violations_csv(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().lines().count(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn enforcement_is_sound_and_idempotent(seed in any::<u64>(), len in 0usize..12) {
            let s = adversarial_session(seed, len);
            let spec = ConstraintSpec::default();
            let (once, _) = enforce(&s, &spec);
            prop_assert_eq!(repairable_count(&validate(&once, &spec)), 0);
            let (twice, again) = enforce(&once, &spec);
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(repairable_count(&again), 0);
            for sp in &once {
                prop_assert!(sp.packet.check_invariants().is_ok());
            }
        }

        #[test]
        fn clean_sessions_are_fixed_points(i in 0usize..40) {
            let s = corpus(40).swap_remove(i);
            let (out, v) = enforce(&s, &ConstraintSpec::default());
            prop_assert!(v.is_empty());
            prop_assert_eq!(out, s);
        }
    }
}
