//! Model configuration. Every tensor shape in the codec derives from a
//! [`ModelConfig`]; its hash ties checkpoints and bitstreams together.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Current config schema version.
pub const CONFIG_VERSION: u32 = 1;

/// Rate-point multipliers for the RD loss, indexed by `lambda_index`.
pub const LAMBDAS: [f64; 4] = [0.0018, 0.0035, 0.0067, 0.013];

/// Group count for the grouped 3x3 convolutions in the light LRM and the
/// default prompt generator.
pub const CONV_GROUPS: usize = 16;

pub const TOY_CONFIG: &str = include_str!("../configs/toy.toml");
pub const LARGE_CONFIG: &str = include_str!("../configs/large.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrmVariant {
    Off,
    Normal,
    Light,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptTargets {
    Off,
    /// The two decoder STBs closest to image space.
    Last2,
    /// Every decoder STB.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptConvs {
    Grouped16,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub name: String,
    /// Output channels of each analysis stage; the last entry is the latent
    /// channel count M. The synthesis transform mirrors this list.
    pub widths: Vec<usize>,
    /// Swin layers per STB, per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage.
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Kernel size of the resampling (de)convolutions.
    pub kernel: usize,
    pub hyper_width: usize,
    /// Channel count M' of the hyper-latent.
    pub hyper_latent: usize,
    /// Hidden width of the SFT alpha/beta networks.
    pub sft_hidden: usize,
    pub prompt_hidden: usize,
    pub lrm: LrmVariant,
    pub prompt_targets: PromptTargets,
    pub prompt_convs: PromptConvs,
    /// Learnable per-head bias on token->prompt logits (zero otherwise).
    #[serde(default)]
    pub prompt_bias: bool,
    pub lambda_index: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self::from_toml(TOY_CONFIG).expect("built-in toy config is valid")
    }

    pub fn large() -> Self {
        Self::from_toml(LARGE_CONFIG).expect("built-in large config is valid")
    }

    /// Resolves `toy` / `large` to the built-in configs, anything else is
    /// read as a file path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "toy" => Ok(Self::toy()),
            "large" => Ok(Self::large()),
            path => Self::from_file(path),
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First eight bytes (little-endian) of SHA-256 over the canonical TOML
    /// form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn with_lambda_index(&self, index: usize) -> Self {
        Self { lambda_index: index, ..self.clone() }
    }

    pub fn with_variant(&self, lrm: LrmVariant, targets: PromptTargets, convs: PromptConvs) -> Self {
        Self { lrm, prompt_targets: targets, prompt_convs: convs, ..self.clone() }
    }

    pub fn lambda(&self) -> f64 {
        LAMBDAS[self.lambda_index]
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn latent_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn downsample(&self) -> usize {
        1 << self.stages()
    }

    /// Image sides are padded to this multiple so that every STB input tiles
    /// into whole windows and the hyper path divides evenly.
    pub fn pad_multiple(&self) -> usize {
        let w = self.window;
        let lcm = w * 4 / gcd(w, 4);
        self.downsample() * lcm
    }

    pub fn has_lrm(&self) -> bool {
        self.lrm != LrmVariant::Off
    }

    pub fn has_prompts(&self) -> bool {
        self.prompt_targets != PromptTargets::Off
    }

    pub fn has_addons(&self) -> bool {
        self.has_lrm() || self.has_prompts()
    }

    /// Decoder STBs in execution order: `(channels, depth, heads, downsample
    /// factor of the STB input)`.
    pub fn decoder_stbs(&self) -> Vec<StbShape> {
        let n = self.stages();
        (0..n)
            .rev()
            .map(|i| StbShape {
                channels: self.widths[i],
                depth: self.depths[i],
                heads: self.heads[i],
                factor: 1 << (i + 1),
            })
            .collect()
    }

    /// Indices into [`Self::decoder_stbs`] that receive prompts.
    pub fn prompt_target_ids(&self) -> Vec<usize> {
        let n = self.stages();
        match self.prompt_targets {
            PromptTargets::Off => Vec::new(),
            PromptTargets::Last2 => (n.saturating_sub(2)..n).collect(),
            PromptTargets::All => (0..n).collect(),
        }
    }

    pub fn prompt_groups(&self) -> usize {
        match self.prompt_convs {
            PromptConvs::Grouped16 => CONV_GROUPS,
            PromptConvs::Full => 1,
        }
    }

    pub fn lrm_groups(&self) -> usize {
        match self.lrm {
            LrmVariant::Light => CONV_GROUPS,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let n = self.widths.len();
        if n == 0 || self.depths.len() != n || self.heads.len() != n {
            return Err(Error::config("widths, depths and heads must be non-empty and of equal length"));
        }
        for (i, (&c, &h)) in self.widths.iter().zip(&self.heads).enumerate() {
            if h == 0 || c % h != 0 {
                return Err(Error::config(format!("stage {i}: {c} channels not divisible by {h} heads")));
            }
        }
        if self.window == 0 || self.kernel.is_multiple_of(2) || self.mlp_ratio == 0 {
            return Err(Error::config("window must be >= 1 and kernel odd"));
        }
        if self.lambda_index >= LAMBDAS.len() {
            return Err(Error::config(format!("lambda_index {} out of range", self.lambda_index)));
        }
        if self.lrm == LrmVariant::Light && !self.latent_channels().is_multiple_of(CONV_GROUPS) {
            return Err(Error::config(format!(
                "light LRM needs M divisible by {CONV_GROUPS}, got {}",
                self.latent_channels()
            )));
        }
        if self.has_prompts() {
            if !self.window.is_multiple_of(2) {
                return Err(Error::config("prompting requires an even window size"));
            }
            if !(self.window / 2).is_multiple_of(2) && self.decoder_stbs().iter().any(|s| s.depth > 1) {
                return Err(Error::config("prompting with shifted layers requires window divisible by 4"));
            }
            let g = self.prompt_groups();
            let mut chans = vec![self.latent_channels(), self.prompt_hidden];
            let stbs = self.decoder_stbs();
            chans.extend(self.prompt_target_ids().iter().map(|&i| stbs[i].channels));
            if let Some(c) = chans.iter().find(|&&c| c % g != 0) {
                return Err(Error::config(format!("prompt generator: {c} channels not divisible by {g} groups")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StbShape {
    pub channels: usize,
    pub depth: usize,
    pub heads: usize,
    pub factor: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_validate() {
        let toy = ModelConfig::toy();
        assert_eq!(toy.widths, vec![32, 48, 64, 96]);
        assert_eq!(toy.latent_channels(), 96);
        assert_eq!(toy.window, 4);
        assert_eq!(toy.downsample(), 16);
        assert_eq!(toy.pad_multiple(), 64);
        ModelConfig::large();
    }

    #[test]
    fn hash_tracks_every_field() {
        let a = ModelConfig::toy();
        assert_eq!(a.hash(), ModelConfig::toy().hash());
        assert_ne!(a.hash(), a.with_lambda_index(0).hash());
        let b = a.with_variant(LrmVariant::Light, a.prompt_targets, a.prompt_convs);
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let a = ModelConfig::large();
        assert_eq!(ModelConfig::from_toml(&a.to_toml()).unwrap(), a);
    }

    #[test]
    fn decoder_stb_shapes_mirror_encoder() {
        let toy = ModelConfig::toy();
        let stbs = toy.decoder_stbs();
        let chans: Vec<_> = stbs.iter().map(|s| s.channels).collect();
        let factors: Vec<_> = stbs.iter().map(|s| s.factor).collect();
        assert_eq!(chans, vec![96, 64, 48, 32]);
        assert_eq!(factors, vec![16, 8, 4, 2]);
        assert_eq!(toy.prompt_target_ids(), vec![2, 3]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::toy();
        c.heads[0] = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = ModelConfig::toy();
        c.window = 3;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::toy();
        c.widths[3] = 90;
        c.heads[3] = 6;
        c.lrm = LrmVariant::Light;
        assert!(c.validate().is_err());

        let mut c = ModelConfig::toy();
        c.prompt_hidden = 40;
        assert!(c.validate().is_err());
        c.prompt_convs = PromptConvs::Full;
        assert!(c.validate().is_ok());
    }
}
