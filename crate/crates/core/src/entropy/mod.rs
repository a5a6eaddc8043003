//! Quantization, discretized Gaussian probability models, range coding and
//! the bitstream container.

mod bitstream;
mod cdf;
mod range;

pub use bitstream::{Bitstream, Header, BITSTREAM_VERSION, FLAG_PADDED, HEADER_LEN, MAGIC};
pub use cdf::{GaussianCdf, SymbolCdf, TableCdf};
pub use range::{range_decode, range_encode, CdfProvider, RangeDecoder, RangeEncoder};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Lower clamp on every Gaussian scale.
pub const SIGMA_MIN: f64 = 0.04;
/// Probability floor for rate estimates; caps a symbol at 16 bits.
pub const P_FLOOR: f64 = 1.0 / 65536.0;
/// Coded symbols live in `[-ALPHABET_BOUND, ALPHABET_BOUND]`; anything else
/// goes through the escape bucket.
pub const ALPHABET_BOUND: i32 = 255;
/// CDF resolution shared by encoder and decoder.
pub const CDF_PRECISION: u32 = 16;

/// Per-element mean and scale of the conditional latent model.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Additive uniform noise in `[-0.5, 0.5)`, the differentiable surrogate.
    Train { seed: u64 },
    /// Round half away from zero.
    Infer,
}

pub fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero; spelled out for clarity
    // of the convention.
    v.signum() * (v.abs() + 0.5).floor()
}

pub fn quantize(v: &Tensor, mode: QuantizeMode) -> Result<Tensor> {
    match mode {
        QuantizeMode::Infer => {
            let a = (v.abs()? + 0.5)?.floor()?;
            // adding +0 turns -0 into +0, matching latents decoded from symbols
            Ok(((a * v.sign()?)? + 0.0)?)
        }
        QuantizeMode::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Vec<f32> = (0..v.elem_count()).map(|_| rng.random_range(-0.5f32..0.5)).collect();
            let u = Tensor::from_vec(noise, v.shape(), v.device())?.to_dtype(v.dtype())?;
            Ok((v + u)?)
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

/// Probability mass of integer `v` under a Gaussian discretized to unit bins.
pub fn symbol_probability(v: f64, mu: f64, sigma: f64) -> f64 {
    let sigma = sigma.max(SIGMA_MIN);
    // Evaluate on the lower tail side, where erfc keeps full precision.
    let d = (v - mu).abs();
    normal_cdf((0.5 - d) / sigma) - normal_cdf((-0.5 - d) / sigma)
}

pub fn symbol_bits(v: f64, mu: f64, sigma: f64) -> f64 {
    -symbol_probability(v, mu, sigma).max(P_FLOOR).log2()
}

/// Bits per element of `values` under the conditional Gaussian model.
pub fn gaussian_bits(values: &Tensor, gp: &GaussianParams) -> Result<Vec<f64>> {
    let v = flat_f64(values)?;
    let mu = flat_f64(&gp.mu)?;
    let sigma = flat_f64(&gp.sigma)?;
    Ok(v.iter().zip(&mu).zip(&sigma).map(|((&v, &m), &s)| symbol_bits(v, m, s)).collect())
}

/// Bits per element of a `(B, M', h, w)` hyper-latent under the per-channel
/// zero-mean prior with `scales` of shape `(M',)`.
pub fn factorized_bits(z_hat: &Tensor, scales: &Tensor) -> Result<Vec<f64>> {
    let (b, c, h, w) = z_hat.dims4()?;
    let z = flat_f64(z_hat)?;
    let s = flat_f64(scales)?;
    let plane = h * w;
    Ok((0..b * c * plane).map(|i| symbol_bits(z[i], 0.0, s[(i / plane) % c])).collect())
}

/// Differentiable total bits of `values` under a discretized Gaussian with
/// per-element `mu`, `sigma` (broadcastable).
pub fn rate_bits(values: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    let d = values.broadcast_sub(mu)?.abs()?;
    let scale = (sigma * std::f64::consts::SQRT_2)?;
    let upper = (d.neg()? + 0.5)?.broadcast_div(&scale)?.erf()?;
    let lower = (d.neg()? - 0.5)?.broadcast_div(&scale)?.erf()?;
    let p = ((upper - lower)? * 0.5)?;
    let p = p.maximum(&p.ones_like()?.affine(P_FLOOR, 0.0)?)?;
    Ok((p.log()?.sum_all()? * (-1.0 / std::f64::consts::LN_2))?)
}

/// Tensor values as a flat `f64` vector.
pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}
