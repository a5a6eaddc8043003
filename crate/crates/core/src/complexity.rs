//! Analytic parameter and multiply-accumulate counts for the decoder side.
//!
//! Conventions: a convolution costs `k^2 * C_in * C_out * H_out * W_out /
//! groups` MACs, a stride-2 transposed convolution `k^2 * C_in * C_out *
//! H_in * W_in`. A Swin layer costs, per token, `4 C^2` for the Q/K/V/output
//! projections, `2 N C` for logits and the weighted sum over an `N`-token
//! window, and `2 r C^2` for an MLP of ratio `r`; prompting adds `C^2 / 2`
//! (K/V projections of the `N/4` prompt rows) and `2 (N/4) C`. Elementwise
//! work (activations, normalization, softmax) is not counted. Per-pixel
//! figures divide by the input image area.

use serde::{Deserialize, Serialize};

use crate::config::{LrmVariant, ModelConfig, PromptConvs, PromptTargets};
use crate::error::{Error, Result};
use crate::nn::ConvSpec;

/// Decoder builds compared in the complexity tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Standard decoder only.
    Base,
    /// LRM + grouped prompt generator on the last two STBs.
    Full,
    /// Light LRM + grouped prompt generator.
    Light,
    Lrm,
    LrmLight,
    Prompt,
    /// Plain-conv prompt generator feeding every decoder STB.
    PromptHeavy,
}

impl Variant {
    pub const ALL: [Variant; 7] =
        [Self::Base, Self::Full, Self::Light, Self::Lrm, Self::LrmLight, Self::Prompt, Self::PromptHeavy];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Full => "full",
            Self::Light => "light",
            Self::Lrm => "lrm",
            Self::LrmLight => "lrm-light",
            Self::Prompt => "prompt",
            Self::PromptHeavy => "prompt-heavy",
        }
    }

    /// `cfg` with the variant's add-on flags.
    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        use LrmVariant as L;
        use PromptConvs as C;
        use PromptTargets as T;
        let (lrm, targets, convs) = match self {
            Self::Base => (L::Off, T::Off, C::Grouped16),
            Self::Full => (L::Normal, T::Last2, C::Grouped16),
            Self::Light => (L::Light, T::Last2, C::Grouped16),
            Self::Lrm => (L::Normal, T::Off, C::Grouped16),
            Self::LrmLight => (L::Light, T::Off, C::Grouped16),
            Self::Prompt => (L::Off, T::Last2, C::Grouped16),
            Self::PromptHeavy => (L::Off, T::All, C::Full),
        };
        cfg.with_variant(lrm, targets, convs)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown variant {s:?}")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::Add for Count {
    type Output = Count;
    fn add(self, o: Count) -> Count {
        Count { params: self.params + o.params, macs: self.macs + o.macs }
    }
}

impl std::ops::AddAssign for Count {
    fn add_assign(&mut self, o: Count) {
        *self = *self + o;
    }
}

impl std::iter::Sum for Count {
    fn sum<I: Iterator<Item = Count>>(iter: I) -> Count {
        iter.fold(Count::default(), |a, b| a + b)
    }
}

pub fn conv_count(spec: ConvSpec, h_out: usize, w_out: usize) -> Count {
    let ConvSpec { in_ch, out_ch, kernel, groups, .. } = spec;
    let k2 = (kernel * kernel) as u64;
    Count {
        params: spec.params() as u64,
        macs: k2 * (in_ch * out_ch) as u64 * (h_out * w_out) as u64 / groups as u64,
    }
}

pub fn deconv_count(in_ch: usize, out_ch: usize, kernel: usize, h_in: usize, w_in: usize) -> Count {
    let k2 = (kernel * kernel) as u64;
    Count { params: k2 * (in_ch * out_ch) as u64 + out_ch as u64, macs: k2 * (in_ch * out_ch * h_in * w_in) as u64 }
}

pub fn linear_count(inp: usize, out: usize, bias: bool, tokens: usize) -> Count {
    Count { params: (inp * out + if bias { out } else { 0 }) as u64, macs: (inp * out * tokens) as u64 }
}

/// One Swin layer over `tokens` positions; the `prompt` flag adds the
/// augmented key/value cost (and the optional per-head prompt bias).
pub fn swin_layer_count(
    channels: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
    tokens: usize,
    prompt: bool,
    prompt_bias: bool,
) -> Count {
    let c = channels as u64;
    let n = (window * window) as u64;
    let hidden = (mlp_ratio * channels) as u64;
    let table = ((2 * window - 1) * (2 * window - 1) * heads) as u64;
    let mut params = 2 * c + 3 * c * c + table + c * c + c + 2 * c + c * hidden + hidden + hidden * c + c;
    let tokens = tokens as u64;
    let mut macs = (4 * c * c + 2 * n * c + 2 * hidden * c) * tokens;
    if prompt {
        // one prompt row per four tokens through W_K and W_V, and N/4 extra
        // logits / weighted-sum terms per query
        macs += 2 * c * c * (tokens / 4) + 2 * (n / 4) * c * tokens;
        if prompt_bias {
            params += heads as u64;
        }
    }
    Count { params, macs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCount {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub config: String,
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub modules: Vec<ModuleCount>,
    pub total_params: u64,
    pub total_macs: u64,
    pub kmacs_per_pixel: f64,
    pub baseline_params: u64,
    pub baseline_macs: u64,
    /// `(variant - base) / base * 100`.
    pub params_overhead_pct: f64,
    pub macs_overhead_pct: f64,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCount> {
        self.modules.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Decoder-side counts of `variant` applied to `cfg` for an `height x width`
/// input (rounded up to the padding multiple).
pub fn count_complexity(cfg: &ModelConfig, height: usize, width: usize, variant: Variant) -> Result<ComplexityReport> {
    if height == 0 || width == 0 {
        return Err(Error::config("complexity needs a non-empty image size"));
    }
    let vcfg = variant.apply(cfg);
    vcfg.validate()?;
    let modules = decoder_modules(&vcfg, height, width);
    let base = decoder_modules(&Variant::Base.apply(cfg), height, width).into_iter().map(count_of).sum::<Count>();
    let total = modules.iter().cloned().map(count_of).sum::<Count>();
    let pct = |v: u64, b: u64| (v as f64 - b as f64) / b as f64 * 100.0;
    Ok(ComplexityReport {
        config: cfg.name.clone(),
        variant,
        height,
        width,
        kmacs_per_pixel: total.macs as f64 / (height * width) as f64 / 1000.0,
        params_overhead_pct: pct(total.params, base.params),
        macs_overhead_pct: pct(total.macs, base.macs),
        modules,
        total_params: total.params,
        total_macs: total.macs,
        baseline_params: base.params,
        baseline_macs: base.macs,
    })
}

fn count_of(m: ModuleCount) -> Count {
    Count { params: m.params, macs: m.macs }
}

/// Module breakdown: `g_s`, `h_s`, `prior_z`, then `pstb` (prompt overhead
/// inside the decoder STBs), `lrm` and `g_p` when present.
fn decoder_modules(cfg: &ModelConfig, height: usize, width: usize) -> Vec<ModuleCount> {
    let pm = cfg.pad_multiple();
    let (hp, wp) = (height.div_ceil(pm) * pm, width.div_ceil(pm) * pm);
    let ds = cfg.downsample();
    let (lh, lw) = (hp / ds, wp / ds);
    let m = cfg.latent_channels();
    let stbs = cfg.decoder_stbs();
    let targets = cfg.prompt_target_ids();

    let mut g_s = Count::default();
    let mut pstb = Count::default();
    for (j, s) in stbs.iter().enumerate() {
        let (h, w) = (hp / s.factor, wp / s.factor);
        for _ in 0..s.depth {
            let plain = swin_layer_count(s.channels, s.heads, cfg.window, cfg.mlp_ratio, h * w, false, false);
            g_s += plain;
            if targets.contains(&j) {
                let p = swin_layer_count(s.channels, s.heads, cfg.window, cfg.mlp_ratio, h * w, true, cfg.prompt_bias);
                pstb += Count { params: p.params - plain.params, macs: p.macs - plain.macs };
            }
        }
        let out = stbs.get(j + 1).map_or(3, |n| n.channels);
        g_s += deconv_count(s.channels, out, cfg.kernel, h, w);
    }

    let (nh, mz) = (cfg.hyper_width, cfg.hyper_latent);
    let (zh, zw) = (lh / 4, lw / 4);
    let h_s = deconv_count(mz, nh, 3, zh, zw)
        + deconv_count(nh, nh, 3, 2 * zh, 2 * zw)
        + conv_count(ConvSpec::new(nh, 2 * m, 3), lh, lw);

    let mut out = vec![
        ModuleCount { name: "g_s".into(), params: g_s.params, macs: g_s.macs },
        ModuleCount { name: "h_s".into(), params: h_s.params, macs: h_s.macs },
        ModuleCount { name: "prior_z".into(), params: mz as u64, macs: 0 },
    ];
    if cfg.has_prompts() {
        out.push(ModuleCount { name: "pstb".into(), params: pstb.params, macs: pstb.macs });
    }
    if cfg.has_lrm() {
        let sft = || {
            let half = conv_count(ConvSpec::new(m, cfg.sft_hidden, 1), lh, lw)
                + conv_count(ConvSpec::new(cfg.sft_hidden, m, 3), lh, lw);
            half + half
        };
        let conv = conv_count(ConvSpec::new(m, m, 3).groups(cfg.lrm_groups()), lh, lw);
        let lrm = sft() + conv + sft() + conv;
        out.push(ModuleCount { name: "lrm".into(), params: lrm.params, macs: lrm.macs });
    }
    if cfg.has_prompts() {
        let g = cfg.prompt_groups();
        let hid = cfg.prompt_hidden;
        let mut gp = conv_count(ConvSpec::new(m, hid, 3).groups(g), lh, lw);
        let mut max_level = 0;
        for &j in &targets {
            let s = stbs[j];
            let level = (ds / s.factor).trailing_zeros() as i32 - 1;
            max_level = max_level.max(level);
            // prompt map at half the STB input resolution
            let (ph, pw) = (hp / s.factor / 2, wp / s.factor / 2);
            let stride = if level < 0 { 2 } else { 1 };
            gp += conv_count(ConvSpec::new(hid, s.channels, 3).groups(g).stride(stride), ph, pw);
        }
        for i in 0..max_level.max(0) as usize {
            gp += conv_count(ConvSpec::new(hid, hid, 3).groups(g), lh << (i + 1), lw << (i + 1));
        }
        out.push(ModuleCount { name: "g_p".into(), params: gp.params, macs: gp.macs });
    }
    out
}
