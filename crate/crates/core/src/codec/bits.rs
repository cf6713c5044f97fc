//! MSB-first bit packing.

use super::CodecError;

#[derive(Default, Debug, Clone)]
pub struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    used: u8,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn put_bit(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | u8::from(bit);
        self.used += 1;
        if self.used == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.used = 0;
        }
    }

    /// Writes the low `count` bits of `value`, most significant first.
    pub fn put_bits(&mut self, value: u32, count: u32) {
        debug_assert!(count <= 32);
        for shift in (0..count).rev() {
            self.put_bit((value >> shift) & 1 == 1);
        }
    }

    /// Writes `count` one-bits.
    pub fn put_ones(&mut self, count: u32) {
        for _ in 0..count {
            self.put_bit(true);
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bytes.len() * 8 + self.used as usize
    }

    /// Zero-pads to a byte boundary.
    pub fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.bytes.push(self.acc << (8 - self.used));
        }
        self.bytes
    }
}

#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    #[inline]
    pub fn get_bit(&mut self) -> Result<bool, CodecError> {
        let byte = *self
            .bytes
            .get(self.pos / 8)
            .ok_or(CodecError::CorruptPayload("bit stream exhausted"))?;
        let bit = (byte >> (7 - self.pos % 8)) & 1 == 1;
        self.pos += 1;
        Ok(bit)
    }

    pub fn get_bits(&mut self, count: u32) -> Result<u32, CodecError> {
        let mut value = 0u32;
        for _ in 0..count {
            value = (value << 1) | u32::from(self.get_bit()?);
        }
        Ok(value)
    }

    pub fn bits_consumed(&self) -> usize {
        self.pos
    }

    /// Bytes after the one holding the last consumed bit, and whether the
    /// padding bits of that byte are all zero.
    pub fn remainder(&self) -> (usize, bool) {
        let used_bytes = self.pos.div_ceil(8);
        let extra = self.bytes.len().saturating_sub(used_bytes);
        let clean_padding = match self.pos % 8 {
            0 => true,
            used => self.bytes[self.pos / 8] & (0xFF >> used) == 0,
        };
        (extra, clean_padding)
    }
}
