//! Context-adaptive Golomb-Rice coding of quantization indices.

use super::bits::{BitReader, BitWriter};
use super::CodecError;

pub const NUM_CONTEXTS: usize = 8;
/// Unary prefixes of this length switch to the raw escape form.
pub const ESCAPE_RUN: u32 = 24;
pub const ESCAPE_BITS: u32 = 16;
pub const MAX_K: u32 = 16;
/// Accumulators are halved when a context count reaches this value.
pub const RESET_COUNT: u32 = 64;
const INITIAL_A: u32 = 4;
const INITIAL_N: u32 = 1;

/// Zigzag map of a signed index onto the non-negative integers.
#[inline]
pub fn map_signed(q: i32) -> u32 {
    if q >= 0 {
        (q as u32) << 1
    } else {
        ((-(q as i64)) as u32) * 2 - 1
    }
}

#[inline]
pub fn unmap_signed(u: u32) -> i32 {
    if u & 1 == 0 {
        (u >> 1) as i32
    } else {
        -(((u >> 1) + 1) as i32)
    }
}

/// Activity bucket of the local gradient `|n - w| + |n - ne|`.
pub fn context_id(n: u8, w: u8, ne: u8) -> usize {
    let delta = n.abs_diff(w) as u32 + n.abs_diff(ne) as u32;
    match delta {
        0 => 0,
        1 => 1,
        2 => 2,
        3..=4 => 3,
        5..=8 => 4,
        9..=16 => 5,
        17..=32 => 6,
        _ => 7,
    }
}

/// Smallest `k` with `n * 2^k >= a`, capped at [`MAX_K`].
pub fn choose_k(a: u32, n: u32) -> u32 {
    debug_assert!(a >= 1 && n >= 1);
    let (a, n) = (u64::from(a), u64::from(n));
    (0..MAX_K).find(|&k| n << k >= a).unwrap_or(MAX_K)
}

pub fn golomb_rice_encode(writer: &mut BitWriter, u: u32, k: u32) {
    assert!(k <= MAX_K, "Golomb-Rice parameter {k} out of range");
    let prefix = u >> k;
    if prefix < ESCAPE_RUN {
        writer.put_ones(prefix);
        writer.put_bit(false);
        writer.put_bits(u, k);
    } else {
        assert!(u < 1 << ESCAPE_BITS, "escape value {u} exceeds 16 bits");
        writer.put_ones(ESCAPE_RUN);
        writer.put_bit(false);
        writer.put_bits(u, ESCAPE_BITS);
    }
}

pub fn golomb_rice_decode(reader: &mut BitReader<'_>, k: u32) -> Result<u32, CodecError> {
    let mut prefix = 0;
    while prefix < ESCAPE_RUN && reader.get_bit()? {
        prefix += 1;
    }
    if prefix == ESCAPE_RUN {
        if reader.get_bit()? {
            return Err(CodecError::CorruptPayload("unterminated escape prefix"));
        }
        return reader.get_bits(ESCAPE_BITS);
    }
    Ok((prefix << k) | reader.get_bits(k)?)
}

/// Per-context magnitude accumulators driving the choice of `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoderState {
    a: [u32; NUM_CONTEXTS],
    n: [u32; NUM_CONTEXTS],
}

impl Default for CoderState {
    fn default() -> Self {
        Self {
            a: [INITIAL_A; NUM_CONTEXTS],
            n: [INITIAL_N; NUM_CONTEXTS],
        }
    }
}

impl CoderState {
    pub fn k(&self, ctx: usize) -> u32 {
        choose_k(self.a[ctx], self.n[ctx])
    }

    pub fn update(&mut self, ctx: usize, q: i32) {
        let a = &mut self.a[ctx];
        let n = &mut self.n[ctx];
        *a = (*a + q.unsigned_abs()).max(1);
        *n += 1;
        if *n == RESET_COUNT {
            *a = a.div_ceil(2);
            *n = n.div_ceil(2);
        }
    }

    pub fn accumulators(&self, ctx: usize) -> (u32, u32) {
        (self.a[ctx], self.n[ctx])
    }

    pub fn encode(&mut self, writer: &mut BitWriter, ctx: usize, q: i32) {
        golomb_rice_encode(writer, map_signed(q), self.k(ctx));
        self.update(ctx, q);
    }

    pub fn decode(&mut self, reader: &mut BitReader<'_>, ctx: usize) -> Result<i32, CodecError> {
        let q = unmap_signed(golomb_rice_decode(reader, self.k(ctx))?);
        self.update(ctx, q);
        Ok(q)
    }
}
