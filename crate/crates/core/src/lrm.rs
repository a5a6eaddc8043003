//! Latent refinement: a residual block that maps the latent of a noisy image
//! toward the latent of its clean counterpart.
//!
//! `refined = latent + conv(sft(conv(sft(latent))))`, where each SFT applies
//! `alpha(F) * F + beta(F)` with small conv networks `alpha`, `beta`
//! conditioned on `F` itself. The light variant uses 16-group convolutions
//! in the residual path. The last convolution starts at zero, so a fresh
//! module is the identity.

use candle_core::Tensor;

use crate::config::{LrmVariant, ModelConfig, CONV_GROUPS};
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ConvSpec};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
struct Affine {
    reduce: Conv2d,
    expand: Conv2d,
}

impl Affine {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            reduce: Conv2d::new(store, &format!("{prefix}.reduce"), ConvSpec::new(channels, hidden, 1))?,
            expand: Conv2d::new(store, &format!("{prefix}.expand"), ConvSpec::new(hidden, channels, 3))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.expand.forward(&leaky_relu(&self.reduce.forward(x)?)?)
    }
}

/// Spatial feature transform.
#[derive(Debug, Clone)]
pub struct Sft {
    alpha: Affine,
    beta: Affine,
}

impl Sft {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            alpha: Affine::new(store, &format!("{prefix}.alpha"), channels, hidden)?,
            beta: Affine::new(store, &format!("{prefix}.beta"), channels, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let a = self.alpha.forward(x)?;
        let b = self.beta.forward(x)?;
        Ok(((a * x)? + b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Lrm {
    sft1: Sft,
    conv1: Conv2d,
    sft2: Sft,
    conv2: Conv2d,
}

impl Lrm {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.latent_channels();
        let groups = match cfg.lrm {
            LrmVariant::Light => CONV_GROUPS,
            _ => 1,
        };
        if !m.is_multiple_of(groups) {
            return Err(Error::config(format!("light LRM needs M divisible by {groups}, got {m}")));
        }
        let spec = ConvSpec::new(m, m, 3).groups(groups);
        Ok(Self {
            sft1: Sft::new(store, "lrm.sft1", m, cfg.sft_hidden)?,
            conv1: Conv2d::new(store, "lrm.conv1", spec)?,
            sft2: Sft::new(store, "lrm.sft2", m, cfg.sft_hidden)?,
            conv2: Conv2d::zeroed(store, "lrm.conv2", spec)?,
        })
    }

    pub fn residual(&self, latent: &Tensor) -> Result<Tensor> {
        let r = self.conv1.forward(&self.sft1.forward(latent)?)?;
        self.conv2.forward(&self.sft2.forward(&r)?)
    }

    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        Ok((latent + self.residual(latent)?)?)
    }
}
