use crate::entropy::EntropyParams;
use crate::error::{Error, Result};

pub const FREQ_BITS: u32 = 16;
pub const FREQ_TOTAL: u32 = 1 << FREQ_BITS;
pub const DEFAULT_SYMBOL_RANGE: (i32, i32) = (-64, 63);

/// Integer frequency table of one latent channel over `[v_min, v_max]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelPmf {
    freqs: Vec<u32>,
    /// `cum[i]` is the total frequency of symbols below index `i`; `len = freqs.len() + 1`.
    cum: Vec<u32>,
}

impl ChannelPmf {
    pub fn from_frequencies(freqs: Vec<u32>) -> Result<Self> {
        if freqs.len() < 2 {
            return Err(Error::invalid("a frequency table needs at least two symbols"));
        }
        if freqs.contains(&0) {
            return Err(Error::invalid("every symbol needs a nonzero frequency"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cum.push(0);
        for &f in &freqs {
            acc = acc
                .checked_add(f)
                .filter(|&a| a <= FREQ_TOTAL)
                .ok_or_else(|| Error::invalid("frequencies exceed the 16-bit total"))?;
            cum.push(acc);
        }
        if acc != FREQ_TOTAL {
            return Err(Error::invalid(format!("frequencies sum to {acc}, expected {FREQ_TOTAL}")));
        }
        Ok(Self { freqs, cum })
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn cum(&self) -> &[u32] {
        &self.cum
    }

    /// Index of the symbol whose cumulative interval contains `count`.
    pub(crate) fn lookup(&self, count: u32) -> usize {
        // last i with cum[i] <= count
        self.cum.partition_point(|&c| c <= count) - 1
    }
}

/// Per-channel frequency tables sharing one symbol range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmfTable {
    pub v_min: i32,
    pub v_max: i32,
    channels: Vec<ChannelPmf>,
}

impl PmfTable {
    pub fn new(v_min: i32, v_max: i32, channels: Vec<ChannelPmf>) -> Result<Self> {
        let n = symbol_count(v_min, v_max)?;
        if channels.is_empty() {
            return Err(Error::invalid("a table needs at least one channel"));
        }
        if channels.iter().any(|c| c.freqs.len() != n) {
            return Err(Error::invalid(format!("every channel table needs {n} symbols")));
        }
        Ok(Self { v_min, v_max, channels })
    }

    pub fn channels(&self) -> &[ChannelPmf] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &ChannelPmf {
        &self.channels[c]
    }

    /// Clamps `value` into range and returns its table index, plus whether it was clamped.
    pub fn index_of(&self, value: i32) -> (usize, bool) {
        let clamped = value.clamp(self.v_min, self.v_max);
        ((clamped - self.v_min) as usize, clamped != value)
    }

    /// Table cross-entropy, `Σ -log₂(freq/2¹⁶)`, of a symbol sequence laid out
    /// channel-major with `plane` symbols per channel plane.
    pub fn cost_bits(&self, symbols: &[i32], plane: usize) -> f64 {
        let c = self.channels.len();
        symbols
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let ch = (i / plane.max(1)) % c;
                let (idx, _) = self.index_of(s);
                f64::from(FREQ_BITS) - f64::from(self.channels[ch].freqs[idx]).log2()
            })
            .sum()
    }
}

fn symbol_count(v_min: i32, v_max: i32) -> Result<usize> {
    if v_min >= v_max {
        return Err(Error::invalid(format!("symbol range [{v_min}, {v_max}] is empty or degenerate")));
    }
    let n = (i64::from(v_max) - i64::from(v_min) + 1) as u64;
    if n > u64::from(FREQ_TOTAL) {
        return Err(Error::invalid(format!(
            "symbol range of {n} values cannot give every symbol a frequency of at least 1 out of {FREQ_TOTAL}"
        )));
    }
    Ok(n as usize)
}

/// Integer frequencies summing to 2¹⁶, each ≥ 1.
///
/// Symbols whose scaled probability falls below one are pinned to 1; the
/// rest share the remaining total in proportion to their probability, and
/// the rounding remainder goes to the largest fractional parts (ties to the
/// lower index).
pub fn quantize_frequencies(probs: &[f64]) -> Result<Vec<u32>> {
    let n = probs.len();
    if n < 2 || n > FREQ_TOTAL as usize {
        return Err(Error::invalid(format!("cannot quantize {n} probabilities to a 16-bit table")));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let total = f64::from(FREQ_TOTAL);
    let mut pinned = vec![false; n];
    let scale = loop {
        let free_mass: f64 = probs.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(q, _)| q).sum();
        let free_total = total - pinned.iter().filter(|&&p| p).count() as f64;
        if free_mass <= 0.0 {
            // nothing left to share proportionally: spread evenly
            pinned.iter_mut().for_each(|p| *p = false);
            break None;
        }
        let scale = free_total / free_mass;
        let mut changed = false;
        for (i, &p) in probs.iter().enumerate() {
            if !pinned[i] && p * scale < 1.0 {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break Some(scale);
        }
    };
    let ideal: Vec<f64> = match scale {
        Some(scale) => probs
            .iter()
            .zip(&pinned)
            .map(|(&p, &pin)| if pin { 1.0 } else { p * scale })
            .collect(),
        None => vec![total / n as f64; n],
    };
    let mut freqs: Vec<u32> = ideal.iter().map(|&v| (v.floor() as u32).max(1)).collect();
    let assigned: u32 = freqs.iter().sum();
    let mut remainder = FREQ_TOTAL
        .checked_sub(assigned)
        .ok_or_else(|| Error::invalid("frequency floors exceed the table total"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if remainder == 0 {
            break;
        }
        freqs[i] += 1;
        remainder -= 1;
    }
    Ok(freqs)
}

/// Discretizes the logistic prior of every channel over `[v_min, v_max]`.
pub fn build_pmf_table(params: &EntropyParams, v_min: i32, v_max: i32) -> Result<PmfTable> {
    let n = symbol_count(v_min, v_max)?;
    let channels = (0..params.channels())
        .map(|c| {
            let probs: Vec<f64> = (0..n)
                .map(|i| params.bin_probability(c, f64::from(v_min) + i as f64))
                .collect();
            ChannelPmf::from_frequencies(quantize_frequencies(&probs)?)
        })
        .collect::<Result<Vec<_>>>()?;
    PmfTable::new(v_min, v_max, channels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_split() {
        assert_eq!(quantize_frequencies(&[0.5, 0.5]).unwrap(), vec![32768, 32768]);
    }

    #[test]
    fn unit_logistic_table() {
        let table = build_pmf_table(&EntropyParams::standard(1), -64, 63).unwrap();
        let freqs = table.channel(0).freqs();
        assert_eq!(freqs.iter().sum::<u32>(), FREQ_TOTAL);
        assert!(freqs.iter().all(|&f| f >= 1));
        assert!(table.channel(0).cum().windows(2).all(|w| w[0] < w[1]));
        // symbols with 2¹⁶·P < 1 are lifted to 1; that mass comes out of the
        // others in proportion, so the bound is 2 plus the pinned count
        let p0 = 0.25f64.tanh();
        let pinned = (-64..=63)
            .filter(|&v| EntropyParams::standard(1).bin_probability(0, f64::from(v)) * 65536.0 < 1.0)
            .count() as f64;
        let f0 = f64::from(freqs[64]);
        assert!((f0 - p0 * 65536.0).abs() <= 2.0 + pinned * p0, "f0 {f0}, pinned {pinned}");
    }

    #[test]
    fn rejects_bad_ranges() {
        let p = EntropyParams::standard(1);
        assert!(build_pmf_table(&p, 3, 3).is_err());
        assert!(build_pmf_table(&p, 0, 70_000).is_err());
    }

    #[test]
    fn degenerate_probabilities_spread_evenly() {
        let f = quantize_frequencies(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(f, vec![16384; 4]);
    }

    #[test]
    fn lookup_finds_interval() {
        let pmf = ChannelPmf::from_frequencies(vec![1, 65534, 1]).unwrap();
        assert_eq!(pmf.lookup(0), 0);
        assert_eq!(pmf.lookup(1), 1);
        assert_eq!(pmf.lookup(65534), 1);
        assert_eq!(pmf.lookup(65535), 2);
    }
}
