//! Byte-oriented range coder (carry-propagating, LZMA style): 32-bit range,
//! 64-bit low, frequencies with power-of-two totals.

use super::cdf::SymbolCdf;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const ESCAPE_CHUNK_BITS: u32 = 16;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Narrows to `[start, start + freq)` out of `2^total_bits`.
    pub fn encode(&mut self, start: u32, freq: u32, total_bits: u32) {
        debug_assert!(freq > 0 && (start as u64 + freq as u64) <= 1 << total_bits);
        let r = self.range >> total_bits;
        self.low += start as u64 * r as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        self.encode(value & ((1 << bits) - 1), 1, bits);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    input: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    step: u32,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 5 || input[0] != 0 {
            return Err(Error::CorruptPayload { position: 0, reason: "missing coder preamble".into() });
        }
        let code = u32::from_be_bytes(input[1..5].try_into().unwrap());
        Ok(Self { input, pos: 5, code, range: u32::MAX, step: 0, overrun: false })
    }

    /// Current target frequency in `[0, 2^total_bits)`; follow with
    /// [`Self::consume`].
    pub fn target(&mut self, total_bits: u32) -> Option<u32> {
        self.step = self.range >> total_bits;
        let v = self.code / self.step;
        (v < 1 << total_bits).then_some(v)
    }

    pub fn consume(&mut self, start: u32, freq: u32) {
        self.code -= start * self.step;
        self.range = self.step * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    pub fn decode_bits(&mut self, bits: u32) -> Option<u32> {
        let v = self.target(bits)?;
        self.consume(v, 1);
        Some(v)
    }

    /// True once the decoder needed bytes past the end of its input.
    pub fn overrun(&self) -> bool {
        self.overrun
    }

    fn next_byte(&mut self) -> u8 {
        match self.input.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }
}

/// Supplies the CDF used at each symbol position. Encoder and decoder must
/// see identical providers.
pub trait CdfProvider {
    type Cdf: SymbolCdf;
    fn cdf(&self, position: usize) -> Self::Cdf;
}

impl<F, C> CdfProvider for F
where
    F: Fn(usize) -> C,
    C: SymbolCdf,
{
    type Cdf = C;
    fn cdf(&self, position: usize) -> C {
        self(position)
    }
}

pub fn range_encode<P: CdfProvider>(symbols: &[i32], provider: &P) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for (position, &s) in symbols.iter().enumerate() {
        let cdf = provider.cdf(position);
        let bits = cdf.precision();
        let idx = s as i64 - cdf.min_symbol() as i64;
        let bucket = if (0..cdf.num_symbols() as i64).contains(&idx) {
            idx as usize
        } else if cdf.has_escape() {
            cdf.num_symbols()
        } else {
            return Err(Error::SymbolOutOfRange { position, symbol: s });
        };
        let (lo, hi) = (cdf.cum(bucket), cdf.cum(bucket + 1));
        if hi <= lo {
            return Err(Error::Numeric(format!("empty CDF bucket {bucket} at position {position}")));
        }
        enc.encode(lo, hi - lo, bits);
        if bucket == cdf.num_symbols() {
            let raw = s as u32;
            enc.encode_bits(raw >> ESCAPE_CHUNK_BITS, ESCAPE_CHUNK_BITS);
            enc.encode_bits(raw & 0xFFFF, ESCAPE_CHUNK_BITS);
        }
    }
    Ok(enc.finish())
}

pub fn range_decode<P: CdfProvider>(bytes: &[u8], provider: &P, count: usize) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let corrupt = |position: usize, reason: &str| Error::CorruptPayload { position, reason: reason.into() };
    let mut out = Vec::with_capacity(count);
    for position in 0..count {
        let cdf = provider.cdf(position);
        let target = dec.target(cdf.precision()).ok_or_else(|| corrupt(position, "target beyond CDF total"))?;
        // largest bucket with cum(bucket) <= target
        let (mut lo, mut hi) = (0usize, cdf.buckets());
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if cdf.cum(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (start, end) = (cdf.cum(lo), cdf.cum(lo + 1));
        dec.consume(start, end - start);
        let symbol = if cdf.has_escape() && lo == cdf.num_symbols() {
            let hi16 = dec.decode_bits(ESCAPE_CHUNK_BITS).ok_or_else(|| corrupt(position, "bad escape"))?;
            let lo16 = dec.decode_bits(ESCAPE_CHUNK_BITS).ok_or_else(|| corrupt(position, "bad escape"))?;
            let v = ((hi16 << ESCAPE_CHUNK_BITS) | lo16) as i32;
            let idx = v as i64 - cdf.min_symbol() as i64;
            if (0..cdf.num_symbols() as i64).contains(&idx) {
                return Err(corrupt(position, "escaped symbol lies inside the alphabet"));
            }
            v
        } else {
            cdf.min_symbol() + lo as i32
        };
        if dec.overrun() {
            return Err(corrupt(position, "payload truncated"));
        }
        out.push(symbol);
    }
    Ok(out)
}
