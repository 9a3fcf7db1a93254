//! At-rest encoding of inline payload objects.
//!
//! ```text
//! "IOVOBJ01" | u64 uncompressed size | u32 crc32(uncompressed) | deflate stream
//! ```
//!
//! The same bytes are stored in the object directory and copied verbatim
//! into snapshots, so a snapshot never recompresses anything.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;

use crate::integrity::{buffer_checksum, Checksum32};

const MAGIC: &[u8; 8] = b"IOVOBJ01";
const HEADER_LEN: usize = 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ObjectError {
    #[error("object header damaged")]
    BadHeader,
    #[error("object size {actual} != recorded {expected}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("object buffer checksum {actual} != recorded {expected}")]
    ChecksumMismatch {
        expected: Checksum32,
        actual: Checksum32,
    },
    #[error("inflate failed: {0}")]
    Inflate(String),
}

pub fn encode_object(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() / 2 + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&buffer_checksum(data).0.to_le_bytes());
    let mut enc = DeflateEncoder::new(out, Compression::fast());
    enc.write_all(data).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Recorded (size, crc32) of an encoded object.
pub fn object_header(raw: &[u8]) -> Result<(u64, Checksum32), ObjectError> {
    if raw.len() < HEADER_LEN || &raw[..8] != MAGIC {
        return Err(ObjectError::BadHeader);
    }
    let size = u64::from_le_bytes(raw[8..16].try_into().expect("8 bytes"));
    let crc = u32::from_le_bytes(raw[16..20].try_into().expect("4 bytes"));
    Ok((size, Checksum32(crc)))
}

/// Inflates an encoded object and checks its size and CRC-32.
pub fn decode_object(raw: &[u8]) -> Result<Vec<u8>, ObjectError> {
    let (size, crc) = object_header(raw)?;
    let mut data = Vec::with_capacity(size.min(1 << 30) as usize);
    DeflateDecoder::new(&raw[HEADER_LEN..])
        .take(size + 1)
        .read_to_end(&mut data)
        .map_err(|e| ObjectError::Inflate(e.to_string()))?;
    if data.len() as u64 != size {
        return Err(ObjectError::SizeMismatch {
            expected: size,
            actual: data.len() as u64,
        });
    }
    let actual = buffer_checksum(&data);
    if actual != crc {
        return Err(ObjectError::ChecksumMismatch { expected: crc, actual });
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        for data in [Vec::new(), b"hello".to_vec(), vec![7u8; 100_000]] {
            let raw = encode_object(&data);
            assert_eq!(decode_object(&raw).unwrap(), data);
        }
    }

    #[test]
    fn damage_is_detected() {
        let data: Vec<u8> = (0..2000u32).map(|i| (i * 13 % 256) as u8).collect();
        let raw = encode_object(&data);
        let mut wrong = 0;
        for bit in 0..raw.len() * 8 {
            let mut bad = raw.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            if let Ok(out) = decode_object(&bad) {
                // Only flips in unused padding bits of the final deflate
                // byte may decode; they must yield the original bytes.
                if out != data {
                    wrong += 1;
                }
            }
        }
        assert_eq!(wrong, 0);
    }
}
