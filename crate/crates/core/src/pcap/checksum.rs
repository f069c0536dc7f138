//! Internet checksum (RFC 1071) helpers for IPv4 and TCP headers.

use std::net::Ipv4Addr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChecksumError {
    #[error("checksummed region has odd length {0}")]
    LengthNotMultipleOfTwo(usize),
}

/// One's-complement sum of big-endian 16-bit words, folded to 16 bits.
fn ones_complement_sum(initial: u32, bytes: &[u8]) -> u16 {
    let mut acc = u64::from(initial);
    let mut chunks = bytes.chunks_exact(2);
    for word in &mut chunks {
        acc += u64::from(u16::from_be_bytes([word[0], word[1]]));
    }
    if let [last] = chunks.remainder() {
        acc += u64::from(*last) << 8;
    }
    while acc > 0xffff {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    acc as u16
}

/// Folded one's-complement sum over `bytes`. A header carrying a correct
/// checksum sums to `0xffff`.
pub fn ones_complement_total(bytes: &[u8]) -> Result<u16, ChecksumError> {
    if bytes.len() % 2 != 0 {
        return Err(ChecksumError::LengthNotMultipleOfTwo(bytes.len()));
    }
    Ok(ones_complement_sum(0, bytes))
}

/// Internet checksum of an IPv4 header whose checksum field is zeroed.
pub fn ipv4_header_checksum(header: &[u8]) -> Result<u16, ChecksumError> {
    ones_complement_total(header).map(|s| !s)
}

/// TCP checksum over the IPv4 pseudo-header and the full segment. Odd-length
/// segments are padded with a trailing zero byte.
pub fn tcp_checksum(src: Ipv4Addr, dst: Ipv4Addr, segment: &[u8]) -> u16 {
    let mut pseudo = [0u8; 12];
    pseudo[0..4].copy_from_slice(&src.octets());
    pseudo[4..8].copy_from_slice(&dst.octets());
    pseudo[9] = 6;
    pseudo[10..12].copy_from_slice(&(segment.len() as u16).to_be_bytes());
    let partial = ones_complement_sum(0, &pseudo);
    !ones_complement_sum(u32::from(partial), segment)
}
