//! Ethernet II / IPv4 / TCP header model and its wire codec.

use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::checksum::{ipv4_header_checksum, tcp_checksum};
use super::PcapError;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IP_PROTO_TCP: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct MacAddr(pub [u8; 6]);

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

/// The eight TCP control bits, stored in wire order (FIN = bit 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ECE: u8 = 0x40;
    pub const CWR: u8 = 0x80;

    pub fn contains(self, bit: u8) -> bool {
        self.0 & bit != 0
    }

    pub fn set(&mut self, bit: u8, on: bool) {
        if on {
            self.0 |= bit;
        } else {
            self.0 &= !bit;
        }
    }

    pub fn with(mut self, bit: u8) -> Self {
        self.0 |= bit;
        self
    }
}

/// Decoded header fields of one captured TCP/IPv4 frame. Payload bytes are
/// not retained, only their count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedPacket {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub ip_version: u8,
    /// Header length in 32-bit words.
    pub ip_ihl: u8,
    pub ip_tos: u8,
    pub ip_len: u16,
    pub ip_id: u16,
    /// 3-bit flags field (reserved, DF, MF).
    pub ip_flags: u8,
    /// 13-bit fragment offset.
    pub ip_frag: u16,
    pub ip_ttl: u8,
    pub ip_proto: u8,
    pub ip_chksum: u16,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    /// Data offset in 32-bit words.
    pub tcp_dataofs: u8,
    pub tcp_flags: TcpFlags,
    pub tcp_window: u16,
    pub tcp_chksum: u16,
    pub tcp_urgptr: u16,
    pub payload_size: u16,
}

impl ParsedPacket {
    pub fn ip_header_len(&self) -> usize {
        4 * usize::from(self.ip_ihl)
    }

    pub fn tcp_header_len(&self) -> usize {
        4 * usize::from(self.tcp_dataofs)
    }

    /// `4·ihl + 4·dataofs + payload_size`, the only consistent `ip_len`.
    pub fn expected_ip_len(&self) -> u32 {
        4 * u32::from(self.ip_ihl) + 4 * u32::from(self.tcp_dataofs) + u32::from(self.payload_size)
    }

    /// Microsecond capture timestamp.
    pub fn timestamp_us(&self) -> u64 {
        u64::from(self.ts_sec) * 1_000_000 + u64::from(self.ts_usec)
    }

    /// Checks every invariant required for serialization.
    pub fn check_invariants(&self) -> Result<(), PcapError> {
        let fail = |msg: String| Err(PcapError::InvariantViolation(msg));
        if self.ts_usec >= 1_000_000 {
            return fail(format!("ts_usec {} not below 1e6", self.ts_usec));
        }
        if self.ip_version != 4 {
            return fail(format!("ip_version {} is not 4", self.ip_version));
        }
        if self.ip_proto != IP_PROTO_TCP {
            return fail(format!("ip_proto {} is not TCP", self.ip_proto));
        }
        if !(5..=15).contains(&self.ip_ihl) {
            return fail(format!("ip_ihl {} outside 5..=15", self.ip_ihl));
        }
        if !(5..=15).contains(&self.tcp_dataofs) {
            return fail(format!("tcp_dataofs {} outside 5..=15", self.tcp_dataofs));
        }
        if self.ip_flags > 0x7 {
            return fail(format!("ip_flags {} exceeds 3 bits", self.ip_flags));
        }
        if self.ip_frag > 0x1fff {
            return fail(format!("ip_frag {} exceeds 13 bits", self.ip_frag));
        }
        if u32::from(self.ip_len) != self.expected_ip_len() {
            return fail(format!(
                "ip_len {} != 4*ihl + 4*dataofs + payload_size = {}",
                self.ip_len,
                self.expected_ip_len()
            ));
        }
        Ok(())
    }

    /// Serializes the IPv4 header (options zero-filled) with the stored checksum.
    /// An ihl below 5 still yields the 20 fixed bytes.
    pub fn ip_header_bytes(&self) -> Vec<u8> {
        let mut h = vec![0u8; self.ip_header_len().max(20)];
        h[0] = (self.ip_version << 4) | (self.ip_ihl & 0x0f);
        h[1] = self.ip_tos;
        h[2..4].copy_from_slice(&self.ip_len.to_be_bytes());
        h[4..6].copy_from_slice(&self.ip_id.to_be_bytes());
        let flags_frag = (u16::from(self.ip_flags & 0x7) << 13) | (self.ip_frag & 0x1fff);
        h[6..8].copy_from_slice(&flags_frag.to_be_bytes());
        h[8] = self.ip_ttl;
        h[9] = self.ip_proto;
        h[10..12].copy_from_slice(&self.ip_chksum.to_be_bytes());
        h[12..16].copy_from_slice(&self.src_ip.octets());
        h[16..20].copy_from_slice(&self.dst_ip.octets());
        h
    }

    /// Checksum the IPv4 header would carry given its other fields.
    pub fn compute_ip_checksum(&self) -> u16 {
        let mut h = self.ip_header_bytes();
        h[10] = 0;
        h[11] = 0;
        // header length is always a multiple of four
        ipv4_header_checksum(&h).unwrap_or(0)
    }

    /// TCP header plus zero-filled options and payload, checksum field zeroed.
    fn tcp_segment_bytes(&self, checksum: u16) -> Vec<u8> {
        let mut s = vec![0u8; self.tcp_header_len().max(20) + usize::from(self.payload_size)];
        s[0..2].copy_from_slice(&self.src_port.to_be_bytes());
        s[2..4].copy_from_slice(&self.dst_port.to_be_bytes());
        s[4..8].copy_from_slice(&self.tcp_seq.to_be_bytes());
        s[8..12].copy_from_slice(&self.tcp_ack.to_be_bytes());
        s[12] = self.tcp_dataofs << 4;
        s[13] = self.tcp_flags.0;
        s[14..16].copy_from_slice(&self.tcp_window.to_be_bytes());
        s[16..18].copy_from_slice(&checksum.to_be_bytes());
        s[18..20].copy_from_slice(&self.tcp_urgptr.to_be_bytes());
        s
    }

    /// TCP checksum over the pseudo-header and a zero-filled payload.
    pub fn compute_tcp_checksum(&self) -> u16 {
        tcp_checksum(self.src_ip, self.dst_ip, &self.tcp_segment_bytes(0))
    }

    /// Builds the Ethernet frame. The TCP checksum is recomputed; the IPv4
    /// checksum is written as stored.
    pub fn encode_frame(&self) -> Result<Vec<u8>, PcapError> {
        self.check_invariants()?;
        let mut frame = Vec::with_capacity(ETHERNET_HEADER_LEN + usize::from(self.ip_len));
        frame.extend_from_slice(&self.dst_mac.0);
        frame.extend_from_slice(&self.src_mac.0);
        frame.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
        frame.extend_from_slice(&self.ip_header_bytes());
        frame.extend_from_slice(&self.tcp_segment_bytes(self.compute_tcp_checksum()));
        Ok(frame)
    }
}

/// Result of decoding one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameOutcome {
    Tcp(ParsedPacket),
    /// Not IPv4, or IPv4 carrying something other than TCP.
    NotTcp,
}

fn out_of_range(field: &'static str, value: u64) -> PcapError {
    PcapError::HeaderFieldOutOfRange { field, value }
}

/// Decodes an Ethernet frame captured at `ts_sec.ts_usec`.
pub fn decode_frame(frame: &[u8], ts_sec: u32, ts_usec: u32) -> Result<FrameOutcome, PcapError> {
    if ts_usec >= 1_000_000 {
        return Err(out_of_range("ts_usec", u64::from(ts_usec)));
    }
    if frame.len() < ETHERNET_HEADER_LEN {
        return Err(out_of_range("frame_len", frame.len() as u64));
    }
    let ethertype = u16::from_be_bytes([frame[12], frame[13]]);
    if ethertype != ETHERTYPE_IPV4 {
        return Ok(FrameOutcome::NotTcp);
    }
    let ip = &frame[ETHERNET_HEADER_LEN..];
    if ip.len() < 20 {
        return Err(out_of_range("frame_len", frame.len() as u64));
    }
    let ip_version = ip[0] >> 4;
    if ip_version != 4 {
        return Err(out_of_range("ip_version", u64::from(ip_version)));
    }
    let ip_proto = ip[9];
    if ip_proto != IP_PROTO_TCP {
        return Ok(FrameOutcome::NotTcp);
    }
    let ip_ihl = ip[0] & 0x0f;
    if ip_ihl < 5 {
        return Err(out_of_range("ip_ihl", u64::from(ip_ihl)));
    }
    let ip_len = u16::from_be_bytes([ip[2], ip[3]]);
    let ihl_bytes = 4 * usize::from(ip_ihl);
    if usize::from(ip_len) > ip.len() || usize::from(ip_len) < ihl_bytes + 20 {
        return Err(out_of_range("ip_len", u64::from(ip_len)));
    }
    let flags_frag = u16::from_be_bytes([ip[6], ip[7]]);
    let tcp = &ip[ihl_bytes..usize::from(ip_len)];
    let tcp_dataofs = tcp[12] >> 4;
    if tcp_dataofs < 5 {
        return Err(out_of_range("tcp_dataofs", u64::from(tcp_dataofs)));
    }
    let tcp_bytes = 4 * usize::from(tcp_dataofs);
    if tcp_bytes > tcp.len() {
        return Err(out_of_range("tcp_dataofs", u64::from(tcp_dataofs)));
    }
    let mac = |at: usize| {
        let mut m = [0u8; 6];
        m.copy_from_slice(&frame[at..at + 6]);
        MacAddr(m)
    };
    Ok(FrameOutcome::Tcp(ParsedPacket {
        ts_sec,
        ts_usec,
        dst_mac: mac(0),
        src_mac: mac(6),
        ip_version,
        ip_ihl,
        ip_tos: ip[1],
        ip_len,
        ip_id: u16::from_be_bytes([ip[4], ip[5]]),
        ip_flags: (flags_frag >> 13) as u8,
        ip_frag: flags_frag & 0x1fff,
        ip_ttl: ip[8],
        ip_proto,
        ip_chksum: u16::from_be_bytes([ip[10], ip[11]]),
        src_ip: Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
        dst_ip: Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
        src_port: u16::from_be_bytes([tcp[0], tcp[1]]),
        dst_port: u16::from_be_bytes([tcp[2], tcp[3]]),
        tcp_seq: u32::from_be_bytes([tcp[4], tcp[5], tcp[6], tcp[7]]),
        tcp_ack: u32::from_be_bytes([tcp[8], tcp[9], tcp[10], tcp[11]]),
        tcp_dataofs,
        tcp_flags: TcpFlags(tcp[13]),
        tcp_window: u16::from_be_bytes([tcp[14], tcp[15]]),
        tcp_chksum: u16::from_be_bytes([tcp[16], tcp[17]]),
        tcp_urgptr: u16::from_be_bytes([tcp[18], tcp[19]]),
        payload_size: (tcp.len() - tcp_bytes) as u16,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcap::checksum::ones_complement_total;

    pub(crate) fn sample() -> ParsedPacket {
        let mut p = ParsedPacket {
            ts_sec: 1_700_000_000,
            ts_usec: 250,
            src_mac: MacAddr([2, 0, 0, 0, 0, 1]),
            dst_mac: MacAddr([2, 0, 0, 0, 0, 2]),
            ip_version: 4,
            ip_ihl: 5,
            ip_tos: 0x10,
            ip_len: 40 + 12 + 100,
            ip_id: 4321,
            ip_flags: 2,
            ip_frag: 0,
            ip_ttl: 64,
            ip_proto: 6,
            ip_chksum: 0,
            src_ip: Ipv4Addr::new(10, 1, 2, 3),
            dst_ip: Ipv4Addr::new(192, 168, 7, 9),
            src_port: 51000,
            dst_port: 443,
            tcp_seq: 0xdead_beef,
            tcp_ack: 17,
            tcp_dataofs: 8,
            tcp_flags: TcpFlags(TcpFlags::PSH | TcpFlags::ACK),
            tcp_window: 4096,
            tcp_chksum: 0,
            tcp_urgptr: 0,
            payload_size: 100,
        };
        p.ip_chksum = p.compute_ip_checksum();
        p.tcp_chksum = p.compute_tcp_checksum();
        p
    }

    #[test]
    fn frame_round_trip() {
        let p = sample();
        let frame = p.encode_frame().unwrap();
        assert_eq!(frame.len(), 14 + 152);
        assert_eq!(decode_frame(&frame, p.ts_sec, p.ts_usec).unwrap(), FrameOutcome::Tcp(p));
    }

    #[test]
    fn encoded_ip_header_self_verifies() {
        let p = sample();
        let frame = p.encode_frame().unwrap();
        assert_eq!(ones_complement_total(&frame[14..34]).unwrap(), 0xffff);
    }

    #[test]
    fn inconsistent_ip_len_rejected() {
        let mut p = sample();
        p.ip_len += 1;
        assert!(matches!(p.encode_frame(), Err(PcapError::InvariantViolation(_))));
    }

    #[test]
    fn udp_frame_is_not_tcp() {
        let mut frame = sample().encode_frame().unwrap();
        frame[14 + 9] = 17;
        assert_eq!(decode_frame(&frame, 0, 0).unwrap(), FrameOutcome::NotTcp);
    }

    #[test]
    fn short_frame_is_an_error() {
        assert!(matches!(
            decode_frame(&[0u8; 10], 0, 0),
            Err(PcapError::HeaderFieldOutOfRange { field: "frame_len", .. })
        ));
    }
}
