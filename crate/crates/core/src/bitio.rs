//! MSB-first bit packing and order-0 exponential-Golomb codes.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CdreError, Result};

/// Bit writer accumulating into a byte buffer, MSB first.
#[derive(Default)]
pub struct BitWriter {
    buf: Vec<u8>,
    cur: u8,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write_bit(&mut self, bit: bool) {
        if bit {
            self.cur |= 1 << (7 - self.used);
        }
        self.used += 1;
        if self.used == 8 {
            self.buf.push(self.cur);
            self.cur = 0;
            self.used = 0;
        }
    }

    /// Writes the low `n` bits of `value`, most significant first.
    pub fn write_bits(&mut self, value: u64, n: u32) {
        debug_assert!(n <= 64);
        for i in (0..n).rev() {
            self.write_bit((value >> i) & 1 == 1);
        }
    }

    /// Unsigned exponential-Golomb, order 0.
    pub fn write_ue(&mut self, value: u32) {
        let code = value as u64 + 1;
        let len = 64 - code.leading_zeros(); // bit length of code
        self.write_bits(0, len - 1);
        self.write_bits(code, len);
    }

    /// Signed exponential-Golomb: 0, 1, -1, 2, -2, ... map to 0, 1, 2, 3, 4, ...
    pub fn write_se(&mut self, value: i32) {
        let mapped = if value > 0 {
            (value as u32) * 2 - 1
        } else {
            (-(value as i64) as u32) * 2
        };
        self.write_ue(mapped);
    }

    /// Pads the final partial byte with zeros and returns the buffer.
    pub fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.buf.push(self.cur);
        }
        self.buf
    }
}

/// Bit reader over a byte slice, MSB first.
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize, // bit position
    /// Added to byte offsets in error messages, so a reader over a payload
    /// slice reports positions in the enclosing stream.
    offset_base: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self {
            bytes,
            pos: 0,
            offset_base: 0,
        }
    }

    pub fn with_offset(bytes: &'a [u8], offset_base: usize) -> Self {
        Self {
            bytes,
            pos: 0,
            offset_base,
        }
    }

    /// Current byte offset (rounded down) within the enclosing stream.
    pub fn byte_offset(&self) -> usize {
        self.offset_base + self.pos / 8
    }

    fn truncated(&self, what: &str) -> CdreError {
        CdreError::MalformedBitstream {
            offset: self.byte_offset(),
            reason: String::from(what),
        }
    }

    pub fn read_bit(&mut self) -> Result<bool> {
        let byte = self.pos / 8;
        if byte >= self.bytes.len() {
            return Err(self.truncated("unexpected end of data"));
        }
        let bit = (self.bytes[byte] >> (7 - (self.pos % 8))) & 1;
        self.pos += 1;
        Ok(bit == 1)
    }

    pub fn read_bits(&mut self, n: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..n {
            v = (v << 1) | self.read_bit()? as u64;
        }
        Ok(v)
    }

    pub fn read_ue(&mut self) -> Result<u32> {
        let mut zeros = 0u32;
        while !self.read_bit()? {
            zeros += 1;
            if zeros > 32 {
                return Err(self.truncated("exp-Golomb prefix too long"));
            }
        }
        let rest = self.read_bits(zeros)?;
        let code = (1u64 << zeros) | rest;
        Ok((code - 1) as u32)
    }

    pub fn read_se(&mut self) -> Result<i32> {
        let mapped = self.read_ue()? as i64;
        let v = if mapped % 2 == 1 {
            (mapped + 1) / 2
        } else {
            -(mapped / 2)
        };
        Ok(v as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn bit_roundtrip() {
        let mut w = BitWriter::new();
        w.write_bits(0b1011, 4);
        w.write_bit(true);
        w.write_bits(0x3ff, 10);
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        assert_eq!(r.read_bits(4).unwrap(), 0b1011);
        assert!(r.read_bit().unwrap());
        assert_eq!(r.read_bits(10).unwrap(), 0x3ff);
    }

    #[test]
    fn ue_known_codes() {
        // Classic order-0 table: 0 -> "1", 1 -> "010", 2 -> "011", 3 -> "00100".
        let mut w = BitWriter::new();
        for v in 0..4 {
            w.write_ue(v);
        }
        // 1 010 011 00100 -> 1010 0110 0100 0000
        assert_eq!(w.finish(), alloc::vec![0b1010_0110, 0b0100_0000]);
    }

    #[test]
    fn se_roundtrip_range() {
        let mut w = BitWriter::new();
        for v in -300..=300 {
            w.write_se(v);
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for v in -300..=300 {
            assert_eq!(r.read_se().unwrap(), v);
        }
    }

    #[test]
    fn seeded_ue_se_roundtrip() {
        let mut rng = crate::rng::stream_rng(11, "bitio-test", 0);
        let mut w = BitWriter::new();
        let mut vals = alloc::vec::Vec::new();
        for _ in 0..2000 {
            let u: u32 = rng.random_range(0..100_000);
            let s: i32 = rng.random_range(-50_000..50_000);
            vals.push((u, s));
            w.write_ue(u);
            w.write_se(s);
        }
        let bytes = w.finish();
        let mut r = BitReader::new(&bytes);
        for (u, s) in vals {
            assert_eq!(r.read_ue().unwrap(), u);
            assert_eq!(r.read_se().unwrap(), s);
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut r = BitReader::with_offset(&[0x00], 9);
        // Prefix of zeros runs off the end of the single byte.
        let err = r.read_ue().unwrap_err();
        match err {
            CdreError::MalformedBitstream { offset, .. } => assert_eq!(offset, 10),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
