//! The codec network: analysis / synthesis transforms built from strided
//! (de)convolutions interleaved with STBs, the hyperprior transforms, and the
//! optional decoder-side add-ons (latent refinement, prompt generator).

use candle_core::Tensor;

use crate::config::{ModelConfig, StbShape};
use crate::entropy::{GaussianParams, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::lrm::Lrm;
use crate::nn::{leaky_relu, softplus, Conv2d, ConvSpec, ConvTranspose2d};
use crate::params::{Init, ParamStore};
use crate::prompt::{PromptGenerator, PromptSet};
use crate::stb::Stb;

/// Parameters outside the frozen base codec.
pub fn is_addon_param(name: &str) -> bool {
    name.starts_with("lrm.") || name.starts_with("g_p.")
}

pub fn is_base_param(name: &str) -> bool {
    !is_addon_param(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    #[default]
    Standard,
    Denoise,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "denoise" => Ok(Self::Denoise),
            other => Err(Error::config(format!("unknown decode mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Denoise => "denoise",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Analysis {
    convs: Vec<Conv2d>,
    stbs: Vec<Stb>,
}

impl Analysis {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut stbs = Vec::new();
        let mut in_ch = 3;
        for i in 0..cfg.stages() {
            let c = cfg.widths[i];
            convs.push(Conv2d::new(store, &format!("g_a.conv{i}"), ConvSpec::new(in_ch, c, cfg.kernel).stride(2))?);
            let shape = StbShape { channels: c, depth: cfg.depths[i], heads: cfg.heads[i], factor: 1 << (i + 1) };
            stbs.push(Stb::new(store, &format!("g_a.stb{i}"), shape, cfg.window, cfg.mlp_ratio, None)?);
            in_ch = c;
        }
        Ok(Self { convs, stbs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, stb) in self.convs.iter().zip(&self.stbs) {
            h = stb.forward(&conv.forward(&h)?, None)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    stbs: Vec<Stb>,
    deconvs: Vec<ConvTranspose2d>,
}

impl Synthesis {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let shapes = cfg.decoder_stbs();
        let targets = cfg.prompt_target_ids();
        let mut stbs = Vec::new();
        let mut deconvs = Vec::new();
        for (j, shape) in shapes.iter().enumerate() {
            let bias = (cfg.prompt_bias && targets.contains(&j)).then(|| format!("g_p.bias.stb{j}"));
            stbs.push(Stb::new(store, &format!("g_s.stb{j}"), *shape, cfg.window, cfg.mlp_ratio, bias.as_deref())?);
            let out = shapes.get(j + 1).map_or(3, |s| s.channels);
            deconvs.push(ConvTranspose2d::new(store, &format!("g_s.deconv{j}"), shape.channels, out, cfg.kernel)?);
        }
        Ok(Self { stbs, deconvs })
    }

    pub fn forward(&self, latent: &Tensor, prompts: Option<&PromptSet>) -> Result<Tensor> {
        let mut h = latent.clone();
        for (j, (stb, deconv)) in self.stbs.iter().zip(&self.deconvs).enumerate() {
            let p = prompts.and_then(|p| p.get(j));
            h = deconv.forward(&stb.forward(&h, p)?)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct HyperAnalysis {
    convs: [Conv2d; 3],
}

impl HyperAnalysis {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (m, nh, mz) = (cfg.latent_channels(), cfg.hyper_width, cfg.hyper_latent);
        Ok(Self {
            convs: [
                Conv2d::new(store, "h_a.conv0", ConvSpec::new(m, nh, 3))?,
                Conv2d::new(store, "h_a.conv1", ConvSpec::new(nh, nh, 3).stride(2))?,
                Conv2d::new(store, "h_a.conv2", ConvSpec::new(nh, mz, 3).stride(2))?,
            ],
        })
    }

    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.convs[0].forward(y)?)?;
        let h = leaky_relu(&self.convs[1].forward(&h)?)?;
        self.convs[2].forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct HyperSynthesis {
    up0: ConvTranspose2d,
    up1: ConvTranspose2d,
    out: Conv2d,
    latent_channels: usize,
}

impl HyperSynthesis {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (m, nh, mz) = (cfg.latent_channels(), cfg.hyper_width, cfg.hyper_latent);
        Ok(Self {
            up0: ConvTranspose2d::new(store, "h_s.up0", mz, nh, 3)?,
            up1: ConvTranspose2d::new(store, "h_s.up1", nh, nh, 3)?,
            out: Conv2d::new(store, "h_s.out", ConvSpec::new(nh, 2 * m, 3))?,
            latent_channels: m,
        })
    }

    pub fn forward(&self, z_hat: &Tensor) -> Result<GaussianParams> {
        let h = leaky_relu(&self.up0.forward(z_hat)?)?;
        let h = leaky_relu(&self.up1.forward(&h)?)?;
        let out = self.out.forward(&h)?;
        let m = self.latent_channels;
        let mu = out.narrow(1, 0, m)?;
        let sigma = softplus(&out.narrow(1, m, m)?)?;
        let floor = sigma.ones_like()?.affine(SIGMA_MIN, 0.0)?;
        Ok(GaussianParams { mu, sigma: sigma.maximum(&floor)? })
    }
}

#[derive(Debug, Clone)]
pub struct CodecModel {
    pub cfg: ModelConfig,
    pub g_a: Analysis,
    pub g_s: Synthesis,
    pub h_a: HyperAnalysis,
    pub h_s: HyperSynthesis,
    z_log_scale: Tensor,
    pub lrm: Option<Lrm>,
    pub g_p: Option<PromptGenerator>,
}

impl CodecModel {
    /// Builds the network, initializing any parameter missing from `store`.
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            g_a: Analysis::new(store, cfg)?,
            g_s: Synthesis::new(store, cfg)?,
            h_a: HyperAnalysis::new(store, cfg)?,
            h_s: HyperSynthesis::new(store, cfg)?,
            z_log_scale: store.get_or_init("prior_z.log_scale", &[cfg.hyper_latent], Init::Zeros)?,
            lrm: if cfg.has_lrm() { Some(Lrm::new(store, cfg)?) } else { None },
            g_p: if cfg.has_prompts() { Some(PromptGenerator::new(store, cfg)?) } else { None },
        })
    }

    /// `x`: `(B, 3, H, W)` with sides divisible by [`ModelConfig::pad_multiple`].
    pub fn analyze(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.cfg.pad_multiple();
        if c != 3 || h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("analysis input {:?} must be (B, 3, k*{m}, k*{m})", x.dims())));
        }
        // inputs and outputs are centered on mid-gray
        self.g_a.forward(&(x - 0.5)?)
    }

    pub fn hyper_analyze(&self, y: &Tensor) -> Result<Tensor> {
        self.h_a.forward(y)
    }

    pub fn hyper_synthesize(&self, z_hat: &Tensor) -> Result<GaussianParams> {
        self.h_s.forward(z_hat)
    }

    /// Per-channel scales of the hyper-latent prior, `(M',)`.
    pub fn z_scales(&self) -> Result<Tensor> {
        let s = self.z_log_scale.exp()?;
        Ok(s.maximum(&s.ones_like()?.affine(SIGMA_MIN, 0.0)?)?)
    }

    pub fn synthesize(&self, latent: &Tensor, prompts: Option<&PromptSet>) -> Result<Tensor> {
        if let Some(p) = prompts {
            let expected = self.cfg.prompt_target_ids();
            if p.targets() != expected {
                return Err(Error::Adapter(format!(
                    "prompt set targets STBs {:?}, model expects {expected:?}",
                    p.targets()
                )));
            }
        }
        Ok((self.g_s.forward(latent, prompts)? + 0.5)?)
    }

    /// Refined latent; identity when the model has no LRM.
    pub fn refine(&self, latent: &Tensor) -> Result<Tensor> {
        match &self.lrm {
            Some(lrm) => lrm.forward(latent),
            None => Ok(latent.clone()),
        }
    }

    pub fn generate_prompts(&self, refined: &Tensor) -> Result<Option<PromptSet>> {
        self.g_p.as_ref().map(|g| g.forward(refined)).transpose()
    }

    /// Synthesis from a decoded latent in either mode.
    pub fn reconstruct(&self, latent: &Tensor, mode: DecodeMode) -> Result<Tensor> {
        match mode {
            DecodeMode::Standard => self.synthesize(latent, None),
            DecodeMode::Denoise => {
                if !self.cfg.has_addons() {
                    return Err(Error::config("model has no denoising add-ons"));
                }
                let refined = self.refine(latent)?;
                let prompts = self.generate_prompts(&refined)?;
                self.synthesize(&refined, prompts.as_ref())
            }
        }
    }
}
