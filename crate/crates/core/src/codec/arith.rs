//! Static-model binary arithmetic coder with 32-bit registers.

use std::collections::BTreeMap;

use crate::error::{data_err, NervError, Result};

/// Frequencies in every table sum to this value.
pub const TABLE_TOTAL: u32 = 1 << 16;

const HALF: u64 = 1 << 31;
const QUARTER: u64 = 1 << 30;
const TOP: u64 = (1 << 32) - 1;

/// Symbol frequencies normalised to [`TABLE_TOTAL`], each at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyTable {
    symbols: Vec<i32>,
    freqs: Vec<u32>,
    cum: Vec<u32>,
}

impl FrequencyTable {
    /// Builds a table from observed symbols. Every distinct symbol keeps a
    /// nonzero share.
    pub fn from_symbols(symbols: &[i32]) -> Self {
        let mut counts: BTreeMap<i32, u64> = BTreeMap::new();
        for &s in symbols {
            *counts.entry(s).or_default() += 1;
        }
        let (syms, counts): (Vec<i32>, Vec<u64>) = counts.into_iter().unzip();
        Self::from_counts(syms, &counts).expect("observed counts are valid")
    }

    /// `symbols` must be strictly increasing and `counts` positive.
    pub fn from_counts(symbols: Vec<i32>, counts: &[u64]) -> Result<Self> {
        if symbols.len() != counts.len() || symbols.windows(2).any(|w| w[0] >= w[1]) {
            return data_err("frequency table symbols must be strictly increasing");
        }
        if symbols.len() > TABLE_TOTAL as usize || counts.iter().any(|&c| c == 0) {
            return data_err("frequency table counts must be positive and fit the table");
        }
        if symbols.is_empty() {
            return Ok(FrequencyTable { symbols, freqs: vec![], cum: vec![0] });
        }
        let total: u64 = counts.iter().sum();
        let mut freqs: Vec<u32> = counts
            .iter()
            .map(|&c| ((c as u128 * TABLE_TOTAL as u128 / total as u128) as u32).max(1))
            .collect();
        let mut sum: i64 = freqs.iter().map(|&f| f as i64).sum();
        while sum != TABLE_TOTAL as i64 {
            let (i, _) = freqs.iter().enumerate().max_by_key(|(_, &f)| f).expect("non-empty");
            if sum > TABLE_TOTAL as i64 {
                let cut = ((sum - TABLE_TOTAL as i64) as u32).min(freqs[i] - 1);
                freqs[i] -= cut;
                sum -= cut as i64;
                if cut == 0 {
                    let j = freqs.iter().position(|&f| f > 1).expect("table over-full");
                    freqs[j] -= 1;
                    sum -= 1;
                }
            } else {
                freqs[i] += (TABLE_TOTAL as i64 - sum) as u32;
                sum = TABLE_TOTAL as i64;
            }
        }
        Self::from_freqs(symbols, freqs)
    }

    /// Table from already-normalised frequencies (as stored in headers).
    pub fn from_freqs(symbols: Vec<i32>, freqs: Vec<u32>) -> Result<Self> {
        if symbols.len() != freqs.len() || symbols.windows(2).any(|w| w[0] >= w[1]) {
            return data_err("frequency table symbols must be strictly increasing");
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if !symbols.is_empty() && (total != TABLE_TOTAL as u64 || freqs.iter().any(|&f| f == 0)) {
            return data_err(format!("frequency table sums to {total}, expected {TABLE_TOTAL}"));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0);
        for &f in &freqs {
            cum.push(cum.last().unwrap() + f);
        }
        Ok(FrequencyTable { symbols, freqs, cum })
    }

    pub fn symbols(&self) -> &[i32] {
        &self.symbols
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    fn index_of(&self, s: i32) -> Option<usize> {
        self.symbols.binary_search(&s).ok()
    }

    /// Ideal code length in bits of `symbols` under this table.
    pub fn cost_bits(&self, symbols: &[i32]) -> f64 {
        symbols
            .iter()
            .map(|&s| {
                let f = self.index_of(s).map_or(0, |i| self.freqs[i]);
                -(f as f64 / TABLE_TOTAL as f64).log2()
            })
            .sum()
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    used: u8,
}

impl BitWriter {
    fn push(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.used += 1;
        if self.used == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.used = 0;
        }
    }

    fn push_with_pending(&mut self, bit: bool, pending: &mut u64) {
        self.push(bit);
        for _ in 0..*pending {
            self.push(!bit);
        }
        *pending = 0;
    }

    fn finish(mut self) -> Vec<u8> {
        if self.used > 0 {
            self.acc <<= 8 - self.used;
            self.bytes.push(self.acc);
        }
        self.bytes
    }
}

/// Encodes `symbols`; an empty input yields an empty payload.
pub fn entropy_encode(symbols: &[i32], table: &FrequencyTable) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let total = TABLE_TOTAL as u64;
    let (mut low, mut high) = (0u64, TOP);
    let mut pending = 0u64;
    let mut out = BitWriter { bytes: Vec::with_capacity(symbols.len() / 2), acc: 0, used: 0 };
    for &s in symbols {
        let i = table.index_of(s).ok_or(NervError::SymbolOutOfTable(s))?;
        let range = high - low + 1;
        high = low + range * table.cum[i + 1] as u64 / total - 1;
        low += range * table.cum[i] as u64 / total;
        loop {
            if high < HALF {
                out.push_with_pending(false, &mut pending);
            } else if low >= HALF {
                out.push_with_pending(true, &mut pending);
                low -= HALF;
                high -= HALF;
            } else if low >= QUARTER && high < HALF + QUARTER {
                pending += 1;
                low -= QUARTER;
                high -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
        }
    }
    pending += 1;
    out.push_with_pending(low >= QUARTER, &mut pending);
    Ok(out.finish())
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BitReader<'_> {
    fn next(&mut self) -> u64 {
        let byte = self.pos / 8;
        let bit = if byte < self.bytes.len() { (self.bytes[byte] >> (7 - self.pos % 8)) & 1 } else { 0 };
        self.pos += 1;
        bit as u64
    }
}

/// Decodes `count` symbols.
pub fn entropy_decode(bytes: &[u8], table: &FrequencyTable, count: usize) -> Result<Vec<i32>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if table.is_empty() {
        return data_err("cannot decode symbols with an empty frequency table");
    }
    let total = TABLE_TOTAL as u64;
    let mut input = BitReader { bytes, pos: 0 };
    let mut value = 0u64;
    for _ in 0..32 {
        value = (value << 1) | input.next();
    }
    let (mut low, mut high) = (0u64, TOP);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let range = high - low + 1;
        let target = ((value - low + 1) * total - 1) / range;
        let i = table.cum.partition_point(|&c| c as u64 <= target) - 1;
        if i >= table.len() {
            return data_err("corrupt arithmetic-coded payload");
        }
        out.push(table.symbols[i]);
        high = low + range * table.cum[i + 1] as u64 / total - 1;
        low += range * table.cum[i] as u64 / total;
        loop {
            if high < HALF {
            } else if low >= HALF {
                low -= HALF;
                high -= HALF;
                value -= HALF;
            } else if low >= QUARTER && high < HALF + QUARTER {
                low -= QUARTER;
                high -= QUARTER;
                value -= QUARTER;
            } else {
                break;
            }
            low <<= 1;
            high = (high << 1) | 1;
            value = (value << 1) | input.next();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_mixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let syms: Vec<i32> = (0..5000).map(|_| (rng.random_range(0.0f64..1.0).powi(3) * 30.0) as i32 - 10).collect();
        let table = FrequencyTable::from_symbols(&syms);
        let bytes = entropy_encode(&syms, &table).unwrap();
        assert_eq!(entropy_decode(&bytes, &table, syms.len()).unwrap(), syms);
        assert!((bytes.len() as f64) * 8.0 <= table.cost_bits(&syms) + 64.0);
    }

    #[test]
    fn degenerate_inputs() {
        let one = vec![3; 10_000];
        let t = FrequencyTable::from_symbols(&one);
        assert_eq!(t.freqs(), &[TABLE_TOTAL]);
        let bytes = entropy_encode(&one, &t).unwrap();
        assert!(bytes.len() <= 80, "{}", bytes.len());
        assert_eq!(entropy_decode(&bytes, &t, one.len()).unwrap(), one);
        let empty = FrequencyTable::from_symbols(&[]);
        assert!(entropy_encode(&[], &empty).unwrap().is_empty());
        assert!(entropy_decode(&[], &empty, 0).unwrap().is_empty());
    }

    #[test]
    fn unknown_symbol_is_named() {
        let t = FrequencyTable::from_symbols(&[1, 2]);
        let err = entropy_encode(&[1, 9], &t).unwrap_err();
        assert!(err.to_string().contains('9'));
    }

    #[test]
    fn normalisation_keeps_rare_symbols() {
        let mut counts = vec![1u64; 300];
        counts[0] = 10_000_000;
        let t = FrequencyTable::from_counts((0..300).collect(), &counts).unwrap();
        assert!(t.freqs().iter().all(|&f| f >= 1));
        assert_eq!(t.freqs().iter().sum::<u32>(), TABLE_TOTAL);
    }
}
