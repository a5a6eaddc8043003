//! Image-level encode and decode. One bitstream carries the hyper-latent and
//! the latent; the decoder recovers the same latent regardless of which
//! reconstruction mode it then runs.

use candle_core::{Device, Tensor};

use crate::checkpoint::Codec;
use crate::codec::DecodeMode;
use crate::entropy::{
    factorized_bits, flat_f64, gaussian_bits, quantize, range_decode, range_encode, Bitstream, GaussianCdf,
    GaussianParams, QuantizeMode,
};
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bitstream: Bitstream,
    /// `8 * total bytes / (H * W)`.
    pub bpp: f64,
    /// Model estimates of the payload sizes, in bits.
    pub model_bits_y: f64,
    pub model_bits_z: f64,
    /// The quantized latent `(1, M, h, w)` that was coded.
    pub y_hat: Tensor,
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub image: ImageTensor,
    /// The entropy-decoded latent, before any refinement or synthesis.
    pub y_hat: Tensor,
}

pub fn encode_image(codec: &Codec, x: &ImageTensor) -> Result<Encoded> {
    let cfg = &codec.cfg;
    let padded = x.pad_reflect(cfg.pad_multiple());
    let input = padded.to_tensor(&Device::Cpu)?.to_dtype(codec.store.dtype())?;
    let model = &codec.model;
    let y = model.analyze(&input)?;
    let y_hat = quantize(&y, QuantizeMode::Infer)?;
    let z_hat = quantize(&model.hyper_analyze(&y)?, QuantizeMode::Infer)?;

    let scales = flat_f64(&model.z_scales()?)?;
    let z_symbols = to_symbols(&z_hat)?;
    let (_, zc, zh, zw) = z_hat.dims4()?;
    let plane = zh * zw;
    let z_payload = range_encode(&z_symbols, &|i: usize| GaussianCdf::new(0.0, scales[(i / plane) % zc]))?;

    let gp = model.hyper_synthesize(&z_hat)?;
    let y_payload = encode_latent(&y_hat, &gp)?;
    let model_bits_y = gaussian_bits(&y_hat, &gp)?.iter().sum();
    let model_bits_z = factorized_bits(&z_hat, &model.z_scales()?)?.iter().sum();

    let bitstream = Bitstream::new(
        codec.config_hash(),
        cfg.lambda_index as u8,
        padded.height() != x.height() || padded.width() != x.width(),
        x.height() as u32,
        x.width() as u32,
        z_payload,
        y_payload,
    );
    let bpp = crate::eval::bpp(&bitstream);
    Ok(Encoded { bitstream, bpp, model_bits_y, model_bits_z, y_hat })
}

/// Recovers the quantized latent from a bitstream.
pub fn decode_latent(codec: &Codec, bs: &Bitstream) -> Result<Tensor> {
    let cfg = &codec.cfg;
    let h = &bs.header;
    if h.config_hash != codec.config_hash() {
        return Err(Error::HashMismatch { expected: codec.config_hash(), found: h.config_hash });
    }
    if h.lambda_index as usize != cfg.lambda_index {
        return Err(Error::Bitstream(format!(
            "bitstream rate point {} does not match model rate point {}",
            h.lambda_index, cfg.lambda_index
        )));
    }
    if h.height == 0 || h.width == 0 {
        return Err(Error::Bitstream("zero image size in header".into()));
    }
    let pm = cfg.pad_multiple();
    let (ph, pw) = ((h.height as usize).div_ceil(pm) * pm, (h.width as usize).div_ceil(pm) * pm);
    let (lh, lw) = (ph / cfg.downsample(), pw / cfg.downsample());
    let (zh, zw, zc) = (lh / 4, lw / 4, cfg.hyper_latent);
    let model = &codec.model;
    let dtype = codec.store.dtype();

    let scales = flat_f64(&model.z_scales()?)?;
    let plane = zh * zw;
    let z = range_decode(&bs.z_payload, &|i: usize| GaussianCdf::new(0.0, scales[(i / plane) % zc]), zc * plane)?;
    let z_hat = from_symbols(&z, (1, zc, zh, zw))?.to_dtype(dtype)?;

    let gp = model.hyper_synthesize(&z_hat)?;
    let mu = flat_f64(&gp.mu)?;
    let sigma = flat_f64(&gp.sigma)?;
    let m = cfg.latent_channels();
    let y = range_decode(&bs.y_payload, &|i: usize| GaussianCdf::new(mu[i], sigma[i]), m * lh * lw)?;
    Ok(from_symbols(&y, (1, m, lh, lw))?.to_dtype(dtype)?)
}

pub fn decode_image(codec: &Codec, bs: &Bitstream, mode: DecodeMode) -> Result<Decoded> {
    let y_hat = decode_latent(codec, bs)?;
    let x_hat = codec.model.reconstruct(&y_hat, mode)?;
    let full = ImageTensor::from_tensor(&x_hat)?;
    let image = full.crop(bs.header.height as usize, bs.header.width as usize)?.clamped();
    Ok(Decoded { image, y_hat })
}

fn encode_latent(y_hat: &Tensor, gp: &GaussianParams) -> Result<Vec<u8>> {
    let symbols = to_symbols(y_hat)?;
    let mu = flat_f64(&gp.mu)?;
    let sigma = flat_f64(&gp.sigma)?;
    range_encode(&symbols, &|i: usize| GaussianCdf::new(mu[i], sigma[i]))
}

fn to_symbols(t: &Tensor) -> Result<Vec<i32>> {
    flat_f64(t)?
        .into_iter()
        .map(|v| {
            if v.is_finite() && v.abs() < i32::MAX as f64 {
                Ok(v as i32)
            } else {
                Err(Error::Numeric(format!("latent value {v} cannot be coded")))
            }
        })
        .collect()
}

fn from_symbols(s: &[i32], shape: (usize, usize, usize, usize)) -> Result<Tensor> {
    let v: Vec<f32> = s.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}
