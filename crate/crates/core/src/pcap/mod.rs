//! Classic PCAP files carrying Ethernet / IPv4 / TCP frames.
//!
//! Only the microsecond-resolution classic format is handled. Files are
//! written little-endian (magic bytes `d4 c3 b2 a1` on disk); byte-swapped
//! files are normalized on read. Payload content is never kept: frames are
//! emitted with zero-filled payloads and options.

pub mod checksum;
mod packet;

use std::fs;
use std::path::Path;

use thiserror::Error;

pub use checksum::{ipv4_header_checksum, ones_complement_total, tcp_checksum, ChecksumError};
pub use packet::{
    decode_frame, FrameOutcome, MacAddr, ParsedPacket, TcpFlags, ETHERNET_HEADER_LEN,
    ETHERTYPE_IPV4, IP_PROTO_TCP,
};

pub const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
pub const PCAP_MAGIC_SWAPPED: u32 = 0xd4c3_b2a1;
pub const LINKTYPE_ETHERNET: u32 = 1;
pub const GLOBAL_HEADER_LEN: usize = 24;
pub const RECORD_HEADER_LEN: usize = 16;
pub const DEFAULT_SNAPLEN: u32 = 65_535;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("malformed pcap file header: {0}")]
    MalformedFileHeader(String),
    #[error("record at byte {offset} needs {needed} bytes but only {available} remain")]
    TruncatedRecord { offset: usize, needed: usize, available: usize },
    #[error("header field {field} out of range: {value}")]
    HeaderFieldOutOfRange { field: &'static str, value: u64 },
    #[error("packet invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapFileHeader {
    /// Magic as read from disk in little-endian order.
    pub magic: u32,
    pub version_major: u16,
    pub version_minor: u16,
    pub thiszone: i32,
    pub sigfigs: u32,
    pub snaplen: u32,
    pub linktype: u32,
}

impl PcapFileHeader {
    pub fn native() -> Self {
        Self {
            magic: PCAP_MAGIC,
            version_major: 2,
            version_minor: 4,
            thiszone: 0,
            sigfigs: 0,
            snaplen: DEFAULT_SNAPLEN,
            linktype: LINKTYPE_ETHERNET,
        }
    }

    pub fn is_swapped(&self) -> bool {
        self.magic == PCAP_MAGIC_SWAPPED
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, PcapError> {
        if bytes.len() < GLOBAL_HEADER_LEN {
            return Err(PcapError::MalformedFileHeader(format!(
                "{} bytes, need {GLOBAL_HEADER_LEN}",
                bytes.len()
            )));
        }
        let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let swapped = match magic {
            PCAP_MAGIC => false,
            PCAP_MAGIC_SWAPPED => true,
            other => {
                return Err(PcapError::MalformedFileHeader(format!("unknown magic {other:#010x}")))
            }
        };
        let r = Reader { swapped };
        let header = Self {
            magic,
            version_major: r.u16(&bytes[4..6]),
            version_minor: r.u16(&bytes[6..8]),
            thiszone: r.u32(&bytes[8..12]) as i32,
            sigfigs: r.u32(&bytes[12..16]),
            snaplen: r.u32(&bytes[16..20]),
            linktype: r.u32(&bytes[20..24]),
        };
        if header.linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::MalformedFileHeader(format!(
                "link type {} is not Ethernet",
                header.linktype
            )));
        }
        Ok(header)
    }

    fn write_native(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&PCAP_MAGIC.to_le_bytes());
        out.extend_from_slice(&self.version_major.to_le_bytes());
        out.extend_from_slice(&self.version_minor.to_le_bytes());
        out.extend_from_slice(&self.thiszone.to_le_bytes());
        out.extend_from_slice(&self.sigfigs.to_le_bytes());
        out.extend_from_slice(&self.snaplen.to_le_bytes());
        out.extend_from_slice(&self.linktype.to_le_bytes());
    }
}

#[derive(Clone, Copy)]
struct Reader {
    swapped: bool,
}

impl Reader {
    fn u16(self, b: &[u8]) -> u16 {
        let v = [b[0], b[1]];
        if self.swapped {
            u16::from_be_bytes(v)
        } else {
            u16::from_le_bytes(v)
        }
    }

    fn u32(self, b: &[u8]) -> u32 {
        let v = [b[0], b[1], b[2], b[3]];
        if self.swapped {
            u32::from_be_bytes(v)
        } else {
            u32::from_le_bytes(v)
        }
    }
}

/// Frames that were read but not turned into packets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SkipCounts {
    /// Non-IPv4 frames and IPv4 frames not carrying TCP.
    pub non_tcp: usize,
    /// Records captured shorter than the original frame (`incl_len < orig_len`).
    pub truncated: usize,
}

impl SkipCounts {
    pub fn total(&self) -> usize {
        self.non_tcp + self.truncated
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capture {
    pub header: PcapFileHeader,
    pub packets: Vec<ParsedPacket>,
    pub skipped: SkipCounts,
}

/// Parses a complete in-memory capture.
pub fn parse_capture(bytes: &[u8]) -> Result<Capture, PcapError> {
    let header = PcapFileHeader::parse(bytes)?;
    let r = Reader { swapped: header.is_swapped() };
    let mut packets = Vec::new();
    let mut skipped = SkipCounts::default();
    let mut offset = GLOBAL_HEADER_LEN;
    while offset < bytes.len() {
        let available = bytes.len() - offset;
        if available < RECORD_HEADER_LEN {
            return Err(PcapError::TruncatedRecord { offset, needed: RECORD_HEADER_LEN, available });
        }
        let rec = &bytes[offset..offset + RECORD_HEADER_LEN];
        let ts_sec = r.u32(&rec[0..4]);
        let ts_usec = r.u32(&rec[4..8]);
        let incl_len = r.u32(&rec[8..12]) as usize;
        let orig_len = r.u32(&rec[12..16]) as usize;
        let needed = RECORD_HEADER_LEN + incl_len;
        if needed > available {
            return Err(PcapError::TruncatedRecord { offset, needed, available });
        }
        let frame = &bytes[offset + RECORD_HEADER_LEN..offset + needed];
        offset += needed;
        if incl_len < orig_len {
            skipped.truncated += 1;
            continue;
        }
        match decode_frame(frame, ts_sec, ts_usec)? {
            FrameOutcome::Tcp(p) => packets.push(p),
            FrameOutcome::NotTcp => skipped.non_tcp += 1,
        }
    }
    if skipped.total() > 0 {
        log::debug!("skipped {} non-TCP and {} truncated records", skipped.non_tcp, skipped.truncated);
    }
    Ok(Capture { header, packets, skipped })
}

pub fn read_pcap(path: impl AsRef<Path>) -> Result<Capture, PcapError> {
    parse_capture(&fs::read(path)?)
}

/// Serializes packets into a native-endian classic pcap image.
pub fn serialize_capture(packets: &[ParsedPacket]) -> Result<Vec<u8>, PcapError> {
    let mut out = Vec::with_capacity(GLOBAL_HEADER_LEN + packets.len() * 96);
    PcapFileHeader::native().write_native(&mut out);
    for p in packets {
        let frame = p.encode_frame()?;
        let len = frame.len() as u32;
        out.extend_from_slice(&p.ts_sec.to_le_bytes());
        out.extend_from_slice(&p.ts_usec.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&frame);
    }
    Ok(out)
}

/// Writes `packets` to `path`, returning the number of bytes written.
pub fn write_pcap(packets: &[ParsedPacket], path: impl AsRef<Path>) -> Result<u64, PcapError> {
    let bytes = serialize_capture(packets)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}
