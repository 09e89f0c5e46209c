//! Carry-propagating range coder with 32-bit state and byte renormalization.
//!
//! Symbols are coded under static per-symbol frequency tables with a total of
//! 2^16; all adaptivity comes from whoever supplies the tables. Interval
//! splits use an exact `range * cum >> 16` product rather than a truncated
//! `range >> 16`, which keeps per-symbol overhead near 2^-24 relative.
//!
//! The first byte of the classic carry scheme is always zero and is not
//! written. The flush emits the fewest bytes that pin a value inside the final
//! interval, and the decoder re-derives that length to detect truncation.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
/// Sum of every frequency table.
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u32 = 1 << 24;

/// Cumulative frequency table over the contiguous alphabet
/// `min_symbol ..= min_symbol + n - 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolModel {
    min_symbol: i32,
    cdf: Vec<u32>,
}

impl SymbolModel {
    /// Table from explicit frequencies, each at least 1, summing to 2^16.
    pub fn from_frequencies(min_symbol: i32, freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::InvariantViolation(
                "every symbol needs a nonzero frequency".into(),
            ));
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &f in freqs {
            acc += u64::from(f);
            if acc > u64::from(PROB_TOTAL) {
                break;
            }
            cdf.push(acc as u32);
        }
        if acc != u64::from(PROB_TOTAL) {
            return Err(Error::InvariantViolation(format!(
                "frequencies sum to {acc}, expected {PROB_TOTAL}"
            )));
        }
        Ok(Self { min_symbol, cdf })
    }

    /// Quantizes a pmf to 16-bit frequencies: floor of `p * 2^16` with a
    /// minimum of 1, then largest-remainder correction to an exact total.
    pub fn from_pmf(min_symbol: i32, pmf: &[f64]) -> Result<Self> {
        let n = pmf.len();
        if n == 0 || n > PROB_TOTAL as usize {
            return Err(Error::InvariantViolation(format!(
                "alphabet of {n} symbols does not fit {PROB_BITS}-bit frequencies"
            )));
        }
        let total = f64::from(PROB_TOTAL);
        let targets: Vec<f64> = pmf.iter().map(|&p| p.max(0.0) * total).collect();
        let mut freqs: Vec<u32> = targets
            .iter()
            .map(|&t| (t.floor() as u32).clamp(1, PROB_TOTAL))
            .collect();
        let sum: i64 = freqs.iter().map(|&f| i64::from(f)).sum();
        let mut deficit = i64::from(PROB_TOTAL) - sum;

        if deficit > 0 {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ra = targets[a] - f64::from(freqs[a]);
                let rb = targets[b] - f64::from(freqs[b]);
                rb.total_cmp(&ra).then(a.cmp(&b))
            });
            let mut k = 0;
            while deficit > 0 {
                freqs[order[k % n]] += 1;
                deficit -= 1;
                k += 1;
            }
        } else if deficit < 0 {
            // take from the entries most above their target first
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                let ra = targets[a] - f64::from(freqs[a]);
                let rb = targets[b] - f64::from(freqs[b]);
                ra.total_cmp(&rb).then(a.cmp(&b))
            });
            while deficit < 0 {
                let mut progressed = false;
                for &i in &order {
                    if deficit == 0 {
                        break;
                    }
                    if freqs[i] > 1 {
                        freqs[i] -= 1;
                        deficit += 1;
                        progressed = true;
                    }
                }
                if !progressed {
                    return Err(Error::InvariantViolation("cannot fit pmf into table".into()));
                }
            }
        }
        Self::from_frequencies(min_symbol, &freqs)
    }

    pub fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    pub fn max_symbol(&self) -> i32 {
        self.min_symbol + self.num_symbols() as i32 - 1
    }

    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn contains(&self, symbol: i32) -> bool {
        symbol >= self.min_symbol && symbol <= self.max_symbol()
    }

    /// Cumulative table, `num_symbols + 1` entries from 0 to 2^16.
    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn frequency(&self, symbol: i32) -> u32 {
        let i = (symbol - self.min_symbol) as usize;
        self.cdf[i + 1] - self.cdf[i]
    }

    /// Quantized probability of `symbol`.
    pub fn probability(&self, symbol: i32) -> f64 {
        f64::from(self.frequency(symbol)) / f64::from(PROB_TOTAL)
    }

    /// Ideal code length of `symbol` under this table, in bits.
    pub fn cost_bits(&self, symbol: i32) -> f64 {
        -self.probability(symbol).log2()
    }

    /// Index of the symbol whose cumulative interval contains `target`.
    fn locate(&self, target: u32) -> usize {
        // largest i with cdf[i] <= target
        let i = self.cdf.partition_point(|&c| c <= target);
        (i - 1).min(self.num_symbols() - 1)
    }
}

/// Supplies the table for each position of a symbol sequence. The coder calls
/// [`next_model`](ModelProvider::next_model) for position `i` only after every
/// symbol before `i` has been passed to
/// [`push_symbol`](ModelProvider::push_symbol), which is what lets the
/// decoder rebuild the same tables.
pub trait ModelProvider {
    fn next_model(&mut self) -> &SymbolModel;
    fn push_symbol(&mut self, symbol: i32);
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    first: bool,
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
            first: true,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, model: &SymbolModel, symbol: i32) -> Result<()> {
        if !model.contains(symbol) {
            return Err(Error::Encode(format!(
                "symbol {symbol} outside alphabet [{}, {}]",
                model.min_symbol(),
                model.max_symbol()
            )));
        }
        let i = (symbol - model.min_symbol) as usize;
        let r = u64::from(self.range);
        let lo = (r * u64::from(model.cdf[i])) >> PROB_BITS;
        let hi = (r * u64::from(model.cdf[i + 1])) >> PROB_BITS;
        self.low += lo;
        self.range = (hi - lo) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
        Ok(())
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.emit(temp.wrapping_add(carry));
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

    fn emit(&mut self, byte: u8) {
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    /// Bytes written so far, excluding anything still held for carries.
    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    pub fn finish(mut self) -> Vec<u8> {
        let k = flush_bytes(self.low, self.range);
        let step = 1u64 << (32 - 8 * k);
        self.low = self.low.div_ceil(step) * step;
        for _ in 0..=k {
            self.shift_low();
        }
        self.out
    }
}

/// Fewest leading bytes of the 32-bit window that identify a value in
/// `[low, low + range)` when the rest is zero.
fn flush_bytes(low: u64, range: u32) -> u32 {
    let end = low + u64::from(range);
    for k in 0..4 {
        let step = 1u64 << (32 - 8 * k);
        if low.div_ceil(step) * step < end {
            return k;
        }
    }
    4
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    low: u64,
    shifts: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            low: 0,
            shifts: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | u32::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, model: &SymbolModel) -> Result<i32> {
        if self.code >= self.range {
            return Err(Error::Decode("corrupt payload: code outside interval".into()));
        }
        let r = u64::from(self.range);
        let target = (((u64::from(self.code) + 1) << PROB_BITS) - 1) / r;
        let i = model.locate(target as u32);
        let lo = (r * u64::from(model.cdf[i])) >> PROB_BITS;
        let hi = (r * u64::from(model.cdf[i + 1])) >> PROB_BITS;
        self.code -= lo as u32;
        self.range = (hi - lo) as u32;
        self.low += lo;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u32::from(self.next_byte());
            self.low = (self.low & 0x00FF_FFFF) << 8;
            self.shifts += 1;
        }
        Ok(model.min_symbol + i as i32)
    }

    /// Checks that the payload length is exactly what the encoder's flush
    /// would have produced for the decoded symbols.
    pub fn finish(self) -> Result<()> {
        let k = flush_bytes(self.low, self.range);
        let step = 1u64 << (32 - 8 * k);
        if self.low + u64::from(self.code) != self.low.div_ceil(step) * step {
            return Err(Error::Decode("corrupt or truncated payload".into()));
        }
        let expected = self.shifts + k as usize;
        match self.data.len().cmp(&expected) {
            std::cmp::Ordering::Less => Err(Error::Decode(format!(
                "truncated payload: {} bytes, expected {expected}",
                self.data.len()
            ))),
            std::cmp::Ordering::Greater => Err(Error::Decode(format!(
                "payload has {} trailing bytes",
                self.data.len() - expected
            ))),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }
}

/// Codes `symbols` in order, asking `models` for each table causally.
pub fn encode_sequence<P: ModelProvider + ?Sized>(symbols: &[i32], models: &mut P) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(models.next_model(), s)?;
        models.push_symbol(s);
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_sequence`]. A provider that does not reproduce the
/// encoder's tables yields wrong symbols; that is not detectable here.
pub fn decode_sequence<P: ModelProvider + ?Sized>(
    payload: &[u8],
    count: usize,
    models: &mut P,
) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(payload);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let s = dec.decode(models.next_model())?;
        models.push_symbol(s);
        out.push(s);
    }
    dec.finish()?;
    Ok(out)
}

/// Provider that hands out the same table for every position.
#[derive(Clone, Debug)]
pub struct StaticProvider(pub SymbolModel);

impl ModelProvider for StaticProvider {
    fn next_model(&mut self) -> &SymbolModel {
        &self.0
    }

    fn push_symbol(&mut self, _symbol: i32) {}
}
