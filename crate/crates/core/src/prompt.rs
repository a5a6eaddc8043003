//! Instance-specific prompt generation for the decoder's STBs.
//!
//! The generator maps the refined latent to one prompt map per target STB,
//! at half the STB input resolution per axis. Partitioning a prompt map with
//! window `w/2` and shift `s/2` yields exactly `N/4` prompts per attention
//! window, aligned with the window index of the STB input.

use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ConvSpec};
use crate::params::ParamStore;
use crate::window::window_partition;

/// Prompt maps keyed by decoder STB index, each `(B, C, H/2, W/2)`.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    pub maps: Vec<(usize, Tensor)>,
}

impl PromptSet {
    pub fn get(&self, stb: usize) -> Option<&Tensor> {
        self.maps.iter().find(|(i, _)| *i == stb).map(|(_, t)| t)
    }

    pub fn targets(&self) -> Vec<usize> {
        self.maps.iter().map(|(i, _)| *i).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Windows a channels-last prompt map `(B, h, w, C)` into `(B * n_windows,
/// window^2 / 4, C)`.
pub fn partition_prompts(prompt_map: &Tensor, window: usize, shift: usize) -> Result<Tensor> {
    if !window.is_multiple_of(2) {
        return Err(Error::config(format!("prompting needs an even window size, got {window}")));
    }
    if !shift.is_multiple_of(2) {
        return Err(Error::config(format!("prompting needs an even shift, got {shift}")));
    }
    Ok(window_partition(prompt_map, window / 2, shift / 2)?.tokens)
}

#[derive(Debug, Clone)]
struct Head {
    stb: usize,
    level: i32,
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct PromptGenerator {
    trunk: Conv2d,
    ups: Vec<Conv2d>,
    heads: Vec<Head>,
}

impl PromptGenerator {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let g = cfg.prompt_groups();
        let hidden = cfg.prompt_hidden;
        let m = cfg.latent_channels();
        let check = |c: usize| {
            if !c.is_multiple_of(g) {
                Err(Error::config(format!("prompt generator: {c} channels not divisible by {g} groups")))
            } else {
                Ok(())
            }
        };
        check(m)?;
        check(hidden)?;
        let trunk = Conv2d::new(store, "g_p.trunk", ConvSpec::new(m, hidden, 3).groups(g))?;
        let stbs = cfg.decoder_stbs();
        let latent_factor = cfg.downsample();
        let mut heads = Vec::new();
        for id in cfg.prompt_target_ids() {
            let s = stbs[id];
            check(s.channels)?;
            // prompt map factor is 2 * s.factor; level counts doublings from
            // the latent resolution.
            let level = (latent_factor / s.factor).trailing_zeros() as i32 - 1;
            let stride = if level < 0 { 2 } else { 1 };
            let conv = Conv2d::scaled(
                store,
                &format!("g_p.head{id}"),
                ConvSpec::new(hidden, s.channels, 3).groups(g).stride(stride),
                0.1,
            )?;
            heads.push(Head { stb: id, level, conv });
        }
        let max_level = heads.iter().map(|h| h.level).max().unwrap_or(0).max(0) as usize;
        let ups = (0..max_level)
            .map(|i| Conv2d::new(store, &format!("g_p.up{i}"), ConvSpec::new(hidden, hidden, 3).groups(g)))
            .collect::<Result<_>>()?;
        Ok(Self { trunk, ups, heads })
    }

    /// `latent`: `(B, M, h, w)`.
    pub fn forward(&self, latent: &Tensor) -> Result<PromptSet> {
        let mut feat = leaky_relu(&self.trunk.forward(latent)?)?;
        let mut maps = Vec::new();
        for level in -1..=(self.ups.len() as i32) {
            if level > 0 {
                let (_, _, h, w) = feat.dims4()?;
                let up = feat.upsample_nearest2d(2 * h, 2 * w)?;
                feat = leaky_relu(&self.ups[level as usize - 1].forward(&up)?)?;
            }
            for head in self.heads.iter().filter(|h| h.level == level) {
                maps.push((head.stb, head.conv.forward(&feat)?));
            }
        }
        maps.sort_by_key(|(i, _)| *i);
        Ok(PromptSet { maps })
    }
}
