//! Symbol models: quantized Gaussian tables and an adaptive byte model.

use std::sync::OnceLock;

use crate::math;
use crate::{Error, Result};

use super::range::{RangeDecoder, RangeEncoder};

/// All table-coded alphabets normalize to this total.
pub const CDF_TOTAL: u32 = 1 << 16;

/// Frequencies are whatever positive integers sum to the total; `cum` has one
/// extra trailing entry so bin i spans `[cum[i], cum[i+1])`.
#[derive(Debug, Clone)]
pub struct CdfTable {
    cum: Vec<u32>,
}

impl CdfTable {
    /// Build from raw probabilities: round to integer frequencies, floor each
    /// bin at 1, then repair the sum deterministically (excess or deficit is
    /// absorbed by the largest bins, lowest index first on ties).
    pub fn quantize(pmf: &[f64]) -> CdfTable {
        let n = pmf.len();
        assert!(n >= 1 && (n as u32) <= CDF_TOTAL);
        let mut freq: Vec<u32> = pmf.iter().map(|&p| ((p * CDF_TOTAL as f64).round() as i64).max(1) as u32).collect();
        let mut sum: i64 = freq.iter().map(|&f| f as i64).sum();
        if sum > CDF_TOTAL as i64 {
            let mut need = sum - CDF_TOTAL as i64;
            while need > 0 {
                // largest bin, lowest index on ties
                let (bi, &bf) = freq.iter().enumerate().max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i))).unwrap();
                let take = need.min(bf as i64 - 1);
                debug_assert!(take > 0, "cannot shrink distribution to total");
                freq[bi] -= take as u32;
                need -= take;
            }
        } else if sum < CDF_TOTAL as i64 {
            let (bi, _) = freq.iter().enumerate().max_by_key(|&(i, &f)| (f, std::cmp::Reverse(i))).unwrap();
            freq[bi] += (CDF_TOTAL as i64 - sum) as u32;
        }
        sum = freq.iter().map(|&f| f as i64).sum();
        debug_assert_eq!(sum, CDF_TOTAL as i64);
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0u32);
        for f in &freq {
            cum.push(cum.last().unwrap() + f);
        }
        CdfTable { cum }
    }

    pub fn n_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn freq(&self, s: usize) -> u32 {
        self.cum[s + 1] - self.cum[s]
    }

    pub fn encode(&self, enc: &mut RangeEncoder, s: usize) {
        enc.encode(self.cum[s], self.freq(s), CDF_TOTAL);
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> usize {
        let t = dec.decode_target(CDF_TOTAL);
        // find s with cum[s] <= t < cum[s+1]
        let s = match self.cum.binary_search(&t) {
            Ok(mut i) => {
                // boundary hit: skip any zero-width bins (none exist, but stay safe)
                while i + 1 < self.cum.len() && self.cum[i + 1] == t {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        dec.advance(self.cum[s], self.freq(s), CDF_TOTAL);
        s
    }

    /// Ideal code length of symbol s under the quantized table, in bits.
    pub fn bits(&self, s: usize) -> f64 {
        -(self.freq(s) as f64 / CDF_TOTAL as f64).log2()
    }
}

pub const SIGMA_MIN: f64 = 0.04;
pub const SIGMA_MAX: f64 = 256.0;
/// Scales are snapped to this many log-spaced levels so tables can be cached;
/// the level grid is part of the coding contract.
pub const SIGMA_LEVELS: usize = 256;
// ln(SIGMA_MAX / SIGMA_MIN) = ln(6400), fixed literal so the grid never moves.
const LN_SIGMA_RATIO: f64 = 8.764053269347762;

fn sigma_grid() -> &'static ([f64; SIGMA_LEVELS], [f64; SIGMA_LEVELS - 1]) {
    static GRID: OnceLock<([f64; SIGMA_LEVELS], [f64; SIGMA_LEVELS - 1])> = OnceLock::new();
    GRID.get_or_init(|| {
        let step = LN_SIGMA_RATIO / (SIGMA_LEVELS - 1) as f64;
        let mut levels = [0.0; SIGMA_LEVELS];
        let mut bounds = [0.0; SIGMA_LEVELS - 1];
        for (i, l) in levels.iter_mut().enumerate() {
            *l = SIGMA_MIN * math::exp(i as f64 * step);
        }
        for (i, b) in bounds.iter_mut().enumerate() {
            *b = SIGMA_MIN * math::exp((i as f64 + 0.5) * step); // geometric midpoint
        }
        (levels, bounds)
    })
}

/// Quantize a scale to its level index (nearest in log space).
pub fn sigma_level(sigma: f64) -> u8 {
    let (_, bounds) = sigma_grid();
    let s = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
    bounds.partition_point(|&b| b < s) as u8
}

/// Representative scale of a level.
pub fn level_sigma(level: u8) -> f64 {
    sigma_grid().0[level as usize]
}

/// Residuals farther than this from the mean escape to bypass coding.
pub const GAUSS_WINDOW: i32 = 255;
const IN_TABLE: usize = (2 * GAUSS_WINDOW - 1) as usize; // -254..=254 around the center
pub const ESCAPE_SYMBOL: usize = IN_TABLE;

/// Gaussian residual alphabet: 509 integer bins centered on round(mu) plus an
/// escape bin that always keeps nonzero mass.
pub struct GaussianTable {
    pub center: i32,
    pub cdf: CdfTable,
}

impl GaussianTable {
    pub fn build(mu: f64, sigma: f64) -> GaussianTable {
        let sigma = sigma.clamp(SIGMA_MIN, SIGMA_MAX);
        let center = mu.round();
        let frac = mu - center;
        let mut pmf = Vec::with_capacity(IN_TABLE + 1);
        let inv = 1.0 / sigma;
        let mut mass = 0.0;
        let mut prev_cdf = math::normal_cdf((-(GAUSS_WINDOW as f64) + 0.5 - frac) * inv);
        for v in -(GAUSS_WINDOW - 1)..=(GAUSS_WINDOW - 1) {
            let hi = math::normal_cdf((v as f64 + 0.5 - frac) * inv);
            let p = hi - prev_cdf;
            prev_cdf = hi;
            mass += p;
            pmf.push(p);
        }
        pmf.push((1.0 - mass).max(0.0)); // escape: both tails
        GaussianTable { center: center as i32, cdf: CdfTable::quantize(&pmf) }
    }

    #[inline]
    pub fn symbol_of(&self, value: i32) -> usize {
        let d = value as i64 - self.center as i64;
        if d.abs() < GAUSS_WINDOW as i64 {
            (d + (GAUSS_WINDOW - 1) as i64) as usize
        } else {
            ESCAPE_SYMBOL
        }
    }

    #[inline]
    pub fn value_of(&self, symbol: usize) -> i32 {
        debug_assert!(symbol < ESCAPE_SYMBOL);
        symbol as i32 - (GAUSS_WINDOW - 1) + self.center
    }
}

/// Zigzag to a 4-byte bypass code for escaped residuals.
pub fn encode_escape_value(enc: &mut RangeEncoder, v: i32) {
    let z = (v.wrapping_shl(1) ^ (v >> 31)) as u32;
    for b in z.to_le_bytes() {
        enc.encode(b as u32, 1, 256);
    }
}

pub fn decode_escape_value(dec: &mut RangeDecoder) -> i32 {
    let mut bytes = [0u8; 4];
    for b in &mut bytes {
        let t = dec.decode_target(256);
        dec.advance(t, 1, 256);
        *b = t as u8;
    }
    let z = u32::from_le_bytes(bytes);
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

/// Per-level table cache for zero-mean Gaussian coding.
pub struct TableCache {
    tables: Vec<Option<Box<GaussianTable>>>,
}

impl Default for TableCache {
    fn default() -> Self {
        Self::new()
    }
}

impl TableCache {
    pub fn new() -> Self {
        TableCache { tables: (0..SIGMA_LEVELS).map(|_| None).collect() }
    }

    pub fn for_sigma(&mut self, sigma: f64) -> &GaussianTable {
        let level = sigma_level(sigma) as usize;
        if self.tables[level].is_none() {
            self.tables[level] = Some(Box::new(GaussianTable::build(0.0, level_sigma(level as u8))));
        }
        self.tables[level].as_deref().unwrap()
    }
}

/// Order-0 adaptive byte model: counts start at 1, bump by 32, halve (keeping
/// a floor of 1) when the total reaches 2^15.
pub struct AdaptiveByteModel {
    freq: [u32; 256],
    total: u32,
}

impl Default for AdaptiveByteModel {
    fn default() -> Self {
        Self::new()
    }
}

impl AdaptiveByteModel {
    pub fn new() -> Self {
        AdaptiveByteModel { freq: [1; 256], total: 256 }
    }

    fn update(&mut self, b: u8) {
        self.freq[b as usize] += 32;
        self.total += 32;
        if self.total >= 1 << 15 {
            self.total = 0;
            for f in self.freq.iter_mut() {
                *f = (*f + 1) >> 1;
                self.total += *f;
            }
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, b: u8) {
        let cum: u32 = self.freq[..b as usize].iter().sum();
        enc.encode(cum, self.freq[b as usize], self.total);
        self.update(b);
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder) -> u8 {
        let t = dec.decode_target(self.total);
        let mut cum = 0u32;
        let mut sym = 0usize;
        loop {
            let f = self.freq[sym];
            if cum + f > t {
                break;
            }
            cum += f;
            sym += 1;
        }
        dec.advance(cum, self.freq[sym], self.total);
        self.update(sym as u8);
        sym as u8
    }
}

/// Errors only arise from gross truncation; helper shared by payload decoders.
pub fn check_overrun(dec: &RangeDecoder) -> Result<()> {
    if dec.excessive_overrun() {
        Err(Error::Format("entropy payload truncated".into()))
    } else {
        Ok(())
    }
}
