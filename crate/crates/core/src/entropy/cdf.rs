use super::{normal_cdf, ALPHABET_BOUND, CDF_PRECISION, SIGMA_MIN};
use crate::error::{Error, Result};

/// An integer CDF over a contiguous symbol range plus an optional escape
/// bucket (always the last bucket). Bucket `i` spans `[cum(i), cum(i + 1))`;
/// `cum(0) == 0` and `cum(buckets()) == 1 << precision()`.
pub trait SymbolCdf {
    fn min_symbol(&self) -> i32;
    fn num_symbols(&self) -> usize;
    fn has_escape(&self) -> bool;
    fn cum(&self, bucket: usize) -> u32;

    fn precision(&self) -> u32 {
        CDF_PRECISION
    }

    fn buckets(&self) -> usize {
        self.num_symbols() + usize::from(self.has_escape())
    }
}

/// Discretized Gaussian over `[-bound, bound]` with escape, quantized so that
/// every bucket keeps a nonzero frequency.
#[derive(Debug, Clone, Copy)]
pub struct GaussianCdf {
    mu: f64,
    sigma: f64,
    bound: i32,
    base: f64,
}

impl GaussianCdf {
    pub fn new(mu: f64, sigma: f64) -> Self {
        Self::with_bound(mu, sigma, ALPHABET_BOUND)
    }

    pub fn with_bound(mu: f64, sigma: f64, bound: i32) -> Self {
        let sigma = sigma.max(SIGMA_MIN);
        let base = normal_cdf((-(bound as f64) - 0.5 - mu) / sigma);
        Self { mu, sigma, bound, base }
    }

    fn lower_edge(&self, bucket: usize) -> f64 {
        let v = -self.bound as f64 + bucket as f64;
        normal_cdf((v - 0.5 - self.mu) / self.sigma)
    }
}

impl SymbolCdf for GaussianCdf {
    fn min_symbol(&self) -> i32 {
        -self.bound
    }

    fn num_symbols(&self) -> usize {
        (2 * self.bound + 1) as usize
    }

    fn has_escape(&self) -> bool {
        true
    }

    fn cum(&self, bucket: usize) -> u32 {
        let total = 1u32 << self.precision();
        let n = self.num_symbols();
        if bucket > n {
            return total;
        }
        let free = (total as usize - self.buckets()) as f64;
        let mass = (self.lower_edge(bucket) - self.base).clamp(0.0, 1.0);
        bucket as u32 + (free * mass).floor() as u32
    }
}

/// Explicit table CDF.
#[derive(Debug, Clone)]
pub struct TableCdf {
    min_symbol: i32,
    cum: Vec<u32>,
    escape: bool,
}

impl TableCdf {
    /// Builds a table from relative frequencies (one per symbol, plus one for
    /// the escape bucket if `escape`). Every bucket gets at least 1.
    pub fn from_frequencies(min_symbol: i32, freqs: &[f64], escape: bool) -> Result<Self> {
        let total = 1u64 << CDF_PRECISION;
        if freqs.is_empty() || freqs.len() as u64 >= total {
            return Err(Error::Param(format!("table CDF needs 1..{total} buckets, got {}", freqs.len())));
        }
        if freqs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::Param("table CDF frequencies must be finite and non-negative".into()));
        }
        let sum: f64 = freqs.iter().sum();
        let free = (total - freqs.len() as u64) as f64;
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0.0;
        cum.push(0u32);
        for (i, f) in freqs.iter().enumerate() {
            acc += if sum > 0.0 { f / sum } else { 1.0 / freqs.len() as f64 };
            let c = if i + 1 == freqs.len() {
                total as u32
            } else {
                (i as u64 + 1 + (free * acc.min(1.0)).floor() as u64) as u32
            };
            cum.push(c);
        }
        Ok(Self { min_symbol, cum, escape })
    }

    pub fn uniform(min_symbol: i32, count: usize) -> Result<Self> {
        Self::from_frequencies(min_symbol, &vec![1.0; count], false)
    }
}

impl SymbolCdf for TableCdf {
    fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    fn num_symbols(&self) -> usize {
        self.cum.len() - 1 - usize::from(self.escape)
    }

    fn has_escape(&self) -> bool {
        self.escape
    }

    fn cum(&self, bucket: usize) -> u32 {
        self.cum[bucket.min(self.cum.len() - 1)]
    }
}

impl<C: SymbolCdf + ?Sized> SymbolCdf for &C {
    fn min_symbol(&self) -> i32 {
        (**self).min_symbol()
    }
    fn num_symbols(&self) -> usize {
        (**self).num_symbols()
    }
    fn has_escape(&self) -> bool {
        (**self).has_escape()
    }
    fn cum(&self, bucket: usize) -> u32 {
        (**self).cum(bucket)
    }
    fn precision(&self) -> u32 {
        (**self).precision()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_monotone(c: &impl SymbolCdf) {
        assert_eq!(c.cum(0), 0);
        assert_eq!(c.cum(c.buckets()), 1 << c.precision());
        for i in 0..c.buckets() {
            assert!(c.cum(i + 1) > c.cum(i), "bucket {i} empty");
        }
    }

    #[test]
    fn gaussian_cdf_is_strictly_monotone() {
        for &(mu, sigma) in &[(0.0, 0.04), (0.3, 1.0), (-250.0, 3.0), (254.7, 0.05), (0.0, 200.0), (1e4, 1.0)] {
            check_monotone(&GaussianCdf::new(mu, sigma));
        }
    }

    #[test]
    fn gaussian_cdf_tracks_model_probability() {
        let c = GaussianCdf::new(0.2, 1.5);
        let idx = (0 - c.min_symbol()) as usize;
        let q = (c.cum(idx + 1) - c.cum(idx)) as f64 / 65536.0;
        let p = super::super::symbol_probability(0.0, 0.2, 1.5);
        assert!((q - p).abs() < 0.01, "{q} vs {p}");
    }

    #[test]
    fn table_cdf_keeps_zero_frequencies_codable() {
        let t = TableCdf::from_frequencies(-2, &[0.0, 5.0, 0.0, 1.0], true).unwrap();
        check_monotone(&t);
        assert_eq!(t.num_symbols(), 3);
        let u = TableCdf::uniform(0, 256).unwrap();
        check_monotone(&u);
        assert_eq!(u.cum(1), 256);
    }
}
