//! Bitstream container. Little-endian layout:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `JDND` |
//! | 1 | version |
//! | 8 | config hash |
//! | 1 | lambda index |
//! | 1 | flags (bit 0: padding used) |
//! | 4 | image height |
//! | 4 | image width |
//! | 4 | hyper-latent payload length |
//! | 4 | latent payload length |
//!
//! followed by the hyper-latent payload and the latent payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"JDND";
pub const BITSTREAM_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 31;
pub const FLAG_PADDED: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub config_hash: u64,
    pub lambda_index: u8,
    pub flags: u8,
    pub height: u32,
    pub width: u32,
    pub z_len: u32,
    pub y_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Bitstream {
    pub fn new(config_hash: u64, lambda_index: u8, padded: bool, height: u32, width: u32, z: Vec<u8>, y: Vec<u8>) -> Self {
        Self {
            header: Header {
                version: BITSTREAM_VERSION,
                config_hash,
                lambda_index,
                flags: if padded { FLAG_PADDED } else { 0 },
                height,
                width,
                z_len: z.len() as u32,
                y_len: y.len() as u32,
            },
            z_payload: z,
            y_payload: y,
        }
    }

    pub fn padded(&self) -> bool {
        self.header.flags & FLAG_PADDED != 0
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.z_payload.len() + self.y_payload.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(&MAGIC);
        out.push(h.version);
        out.extend_from_slice(&h.config_hash.to_le_bytes());
        out.push(h.lambda_index);
        out.push(h.flags);
        out.extend_from_slice(&h.height.to_le_bytes());
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.y_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&self.y_payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let header = Header {
            version: bytes[4],
            config_hash: u64::from_le_bytes(bytes[5..13].try_into().unwrap()),
            lambda_index: bytes[13],
            flags: bytes[14],
            height: u32_at(15),
            width: u32_at(19),
            z_len: u32_at(23),
            y_len: u32_at(27),
        };
        if header.version != BITSTREAM_VERSION {
            return Err(Error::Bitstream(format!("unsupported version {}", header.version)));
        }
        let z_end = HEADER_LEN + header.z_len as usize;
        let y_end = z_end + header.y_len as usize;
        if bytes.len() < y_end {
            return Err(Error::Bitstream(format!("truncated: header declares {y_end} bytes, got {}", bytes.len())));
        }
        if bytes.len() > y_end {
            return Err(Error::Bitstream(format!("{} trailing bytes", bytes.len() - y_end)));
        }
        Ok(Self { header, z_payload: bytes[HEADER_LEN..z_end].to_vec(), y_payload: bytes[z_end..y_end].to_vec() })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream::new(0x0102_0304_0506_0708, 3, true, 64, 48, vec![9, 8, 7], vec![1, 2, 3, 4, 5])
    }

    #[test]
    fn layout_is_bit_exact() {
        let b = sample().to_bytes();
        assert_eq!(b.len(), HEADER_LEN + 8);
        assert_eq!(&b[..4], b"JDND");
        assert_eq!(b[4], 1);
        assert_eq!(&b[5..13], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(b[13], 3);
        assert_eq!(b[14], FLAG_PADDED);
        assert_eq!(&b[15..19], &[64, 0, 0, 0]);
        assert_eq!(&b[19..23], &[48, 0, 0, 0]);
        assert_eq!(&b[23..27], &[3, 0, 0, 0]);
        assert_eq!(&b[27..31], &[5, 0, 0, 0]);
        assert_eq!(&b[31..34], &[9, 8, 7]);
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let s = sample();
        let bytes = s.to_bytes();
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), s);
        assert!(matches!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Bitstream(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Bitstream::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Bitstream::from_bytes(&bad).is_err());
    }
}
