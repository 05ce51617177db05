//! 32-bit renormalizing range coder with byte-wise output.
//!
//! The encoder keeps a 33-bit `low` so a carry out of the 32-bit window can
//! be propagated into bytes already queued (a pending byte plus a run of
//! `0xFF` bytes), in the style of the LZMA coder. Every payload starts with
//! one zero byte and ends with four flush bytes.

use super::pmf::{ChannelPmf, PmfTable, FREQ_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

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
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Narrows the interval to `[cum, cum + freq)` out of 2¹⁶.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << FREQ_BITS);
        let r = self.range >> FREQ_BITS;
        self.low += u64::from(r) * u64::from(cum);
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
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
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        if dec.next_byte()? != 0 {
            return Err(Error::Decode("payload does not start with the coder's zero byte".into()));
        }
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("payload truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    /// Decodes one symbol index of `pmf`.
    pub fn decode(&mut self, pmf: &ChannelPmf) -> Result<usize> {
        let r = self.range >> FREQ_BITS;
        let count = self.code / r;
        if count >= 1 << FREQ_BITS {
            return Err(Error::Decode("code value outside the coding interval".into()));
        }
        let idx = pmf.lookup(count);
        let (lo, hi) = (pmf.cum()[idx], pmf.cum()[idx + 1]);
        self.code -= r * lo;
        self.range = r * (hi - lo);
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(idx)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Coded bytes plus the number of symbols that fell outside the table range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPayload {
    pub bytes: Vec<u8>,
    pub clamped: usize,
}

/// Codes `symbols`, laid out channel-major with `plane` symbols per channel
/// plane, against the per-channel tables of `table`. Out-of-range symbols are
/// clamped to the table range and counted.
pub fn encode_symbols(symbols: &[i32], table: &PmfTable, plane: usize) -> EncodedPayload {
    let channels = table.channels().len();
    let plane = plane.max(1);
    let mut enc = RangeEncoder::new();
    let mut clamped = 0;
    for (i, &s) in symbols.iter().enumerate() {
        let pmf = table.channel((i / plane) % channels);
        let (idx, was_clamped) = table.index_of(s);
        clamped += usize::from(was_clamped);
        enc.encode(pmf.cum()[idx], pmf.freqs()[idx]);
    }
    EncodedPayload {
        bytes: enc.finish(),
        clamped,
    }
}

/// Inverse of [`encode_symbols`]. Fails on truncated or corrupt payloads.
pub fn decode_symbols(payload: &[u8], count: usize, table: &PmfTable, plane: usize) -> Result<Vec<i32>> {
    let channels = table.channels().len();
    let plane = plane.max(1);
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let pmf = table.channel((i / plane) % channels);
        let idx = dec.decode(pmf)?;
        out.push(table.v_min + idx as i32);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::pmf::{quantize_frequencies, ChannelPmf};

    fn table(probs: &[f64], v_min: i32) -> PmfTable {
        let pmf = ChannelPmf::from_frequencies(quantize_frequencies(probs).unwrap()).unwrap();
        PmfTable::new(v_min, v_min + probs.len() as i32 - 1, vec![pmf]).unwrap()
    }

    #[test]
    fn uniform_bytes_cost_one_byte_each() {
        let t = table(&[1.0 / 256.0; 256], 0);
        let symbols: Vec<i32> = (0..1000).map(|i| (i * 97 + 13) % 256).collect();
        let payload = encode_symbols(&symbols, &t, 1);
        assert!((1000..=1010).contains(&payload.bytes.len()), "{}", payload.bytes.len());
        assert_eq!(decode_symbols(&payload.bytes, 1000, &t, 1).unwrap(), symbols);
    }

    #[test]
    fn skewed_source_compresses() {
        let t = table(&[0.99, 0.01], 0);
        let symbols: Vec<i32> = (0..1000).map(|i| i32::from(i % 100 == 7)).collect();
        let payload = encode_symbols(&symbols, &t, 1);
        assert!(payload.bytes.len() <= 25, "{}", payload.bytes.len());
        assert_eq!(decode_symbols(&payload.bytes, 1000, &t, 1).unwrap(), symbols);
    }

    #[test]
    fn empty_sequence_is_termination_only() {
        let t = table(&[0.5, 0.5], 0);
        let payload = encode_symbols(&[], &t, 1);
        assert_eq!(payload.bytes.len(), 5);
        assert!(decode_symbols(&payload.bytes, 0, &t, 1).unwrap().is_empty());
    }

    #[test]
    fn near_certain_symbol_costs_almost_nothing() {
        let mut probs = vec![0.0; 8];
        probs[3] = 1.0;
        let t = table(&probs, -3);
        let symbols = vec![0; 5000];
        let payload = encode_symbols(&symbols, &t, 1);
        // 5000 · log2(65536/65529) ≈ 0.77 bits of content
        assert!(payload.bytes.len() <= 6, "{}", payload.bytes.len());
        assert_eq!(decode_symbols(&payload.bytes, 5000, &t, 1).unwrap(), symbols);
    }

    #[test]
    fn out_of_range_symbols_are_clamped_and_counted() {
        let t = table(&[0.25; 4], -2);
        let payload = encode_symbols(&[-5, 0, 1, 9], &t, 1);
        assert_eq!(payload.clamped, 2);
        assert_eq!(decode_symbols(&payload.bytes, 4, &t, 1).unwrap(), vec![-2, 0, 1, 1]);
    }

    #[test]
    fn truncation_is_an_error() {
        let t = table(&[1.0 / 16.0; 16], 0);
        let symbols: Vec<i32> = (0..200).map(|i| (i * 7) % 16).collect();
        let payload = encode_symbols(&symbols, &t, 1);
        for cut in [0, 1, 4, payload.bytes.len() / 2, payload.bytes.len() - 1] {
            let err = decode_symbols(&payload.bytes[..cut], 200, &t, 1).unwrap_err();
            assert!(matches!(err, Error::Decode(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn carry_propagates_through_ff_runs() {
        // symbols at the top of the interval push low towards the carry boundary
        let t = table(&[1e-4, 1e-4, 1.0 - 2e-4], 0);
        let mut symbols = vec![2; 3000];
        for i in (0..3000).step_by(37) {
            symbols[i] = 1;
        }
        let payload = encode_symbols(&symbols, &t, 1);
        assert_eq!(decode_symbols(&payload.bytes, symbols.len(), &t, 1).unwrap(), symbols);
    }
}
