//! Byte-oriented range coder (carry-propagating, 32-bit range) over 16-bit
//! frequency tables.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` of a `PROB_TOTAL` table.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `bits` (≤ 16) raw bits.
    pub fn encode_raw(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= PROB_BITS && value < (1 << bits));
        let shift = PROB_BITS - bits;
        self.encode(value << shift, 1 << shift);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn emit(&mut self, b: u8) {
        // the first byte is always zero and is left implicit
        if self.started {
            self.out.push(b);
        } else {
            debug_assert_eq!(b, 0);
            self.started = true;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    /// Offset of `data[0]` within the enclosing stream, for error reports.
    base: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8], base: usize) -> Result<Self> {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            base,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next()?);
        }
        Ok(d)
    }

    fn next(&mut self) -> Result<u8> {
        let b = *self.data.get(self.pos).ok_or_else(|| Error::Truncated {
            offset: self.base + self.pos,
            message: "range-coded payload ended early".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    /// Finds the symbol whose interval holds the next code value; `cum` is
    /// the cumulative table (length symbols + 1, last entry `PROB_TOTAL`).
    pub fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let r = self.range >> PROB_BITS;
        let v = (self.code / r).min(PROB_TOTAL - 1);
        let s = cum.partition_point(|&c| c <= v) - 1;
        self.consume(r, cum[s], cum[s + 1] - cum[s])?;
        Ok(s)
    }

    pub fn decode_raw(&mut self, bits: u32) -> Result<u32> {
        let shift = PROB_BITS - bits;
        let r = self.range >> PROB_BITS;
        let v = (self.code / r).min(PROB_TOTAL - 1) >> shift;
        self.consume(r, v << shift, 1 << shift)?;
        Ok(v)
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code -= r * cum;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next()?);
        }
        Ok(())
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}
