//! Swin-Transformer blocks. A block is a stack of layers
//! `x + proj(attn(LN(x)))` then `x + MLP(LN(x))`, alternating window shift 0
//! and `window / 2`. Given a prompt map, every layer attends over the
//! prompt-augmented key/value set (P-STB); without one it is a plain STB.

use candle_core::Tensor;

use crate::attention::{pstb_attention, AttentionWeights};
use crate::config::StbShape;
use crate::error::{Error, Result};
use crate::nn::{to_channels_first, to_channels_last, LayerNorm, Linear};
use crate::params::{Init, ParamStore};
use crate::prompt::partition_prompts;
use crate::window::{window_partition, window_reverse, WindowedTokens};

#[derive(Debug, Clone)]
pub struct SwinLayer {
    norm1: LayerNorm,
    pub attn: AttentionWeights,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    shifted: bool,
    prompt_bias: Option<Tensor>,
}

impl SwinLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        prompt_bias: Option<&str>,
    ) -> Result<Self> {
        let hidden = channels * mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), channels)?,
            attn: AttentionWeights::new(store, &format!("{prefix}.attn"), channels, heads, window)?,
            proj: Linear::new(store, &format!("{prefix}.proj"), channels, channels, true)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), channels)?,
            fc1: Linear::new(store, &format!("{prefix}.fc1"), channels, hidden, true)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, channels, true)?,
            shifted,
            prompt_bias: match prompt_bias {
                Some(name) => Some(store.get_or_init(name, &[heads], Init::Zeros)?),
                None => None,
            },
        })
    }

    pub fn shift_for(&self, height: usize, width: usize) -> usize {
        let ws = self.attn.window;
        if self.shifted && (height > ws || width > ws) {
            ws / 2
        } else {
            0
        }
    }

    /// `x`: `(B, H, W, C)`; `prompt_map`: `(B, H/2, W/2, C)`.
    pub fn forward(&self, x: &Tensor, prompt_map: Option<&Tensor>) -> Result<Tensor> {
        let (_, h, w, _) = x.dims4()?;
        let ws = self.attn.window;
        let shift = self.shift_for(h, w);
        let windows = window_partition(&self.norm1.forward(x)?, ws, shift)?;
        let prompts = match prompt_map {
            Some(p) => Some(partition_prompts(p, ws, shift)?),
            None => None,
        };
        let attended = pstb_attention(&windows.tokens, prompts.as_ref(), &self.attn, self.prompt_bias.as_ref())?;
        let attended = self.proj.forward(&attended)?;
        let map = window_reverse(&WindowedTokens { tokens: attended, ..windows })?;
        let x = (x + map)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + mlp)?)
    }
}

#[derive(Debug, Clone)]
pub struct Stb {
    pub layers: Vec<SwinLayer>,
    channels: usize,
}

impl Stb {
    /// `prompt_bias`: parameter-name prefix for learnable prompt biases when
    /// this block is a prompt target and the config enables them.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        shape: StbShape,
        window: usize,
        mlp_ratio: usize,
        prompt_bias: Option<&str>,
    ) -> Result<Self> {
        let layers = (0..shape.depth)
            .map(|i| {
                let bias_name = prompt_bias.map(|p| format!("{p}.layer{i}"));
                SwinLayer::new(
                    store,
                    &format!("{prefix}.layer{i}"),
                    shape.channels,
                    shape.heads,
                    window,
                    mlp_ratio,
                    i % 2 == 1,
                    bias_name.as_deref(),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers, channels: shape.channels })
    }

    /// `x`: `(B, C, H, W)`; `prompt_map`: `(B, C, H/2, W/2)`. The same prompt
    /// map serves every layer, re-partitioned with each layer's shift.
    pub fn forward(&self, x: &Tensor, prompt_map: Option<&Tensor>) -> Result<Tensor> {
        if self.layers.is_empty() {
            return Ok(x.clone());
        }
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!("STB expects {} channels, got {c}", self.channels)));
        }
        let prompt_map = match prompt_map {
            Some(p) => {
                if p.dims() != [b, c, h / 2, w / 2] || h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Adapter(format!(
                        "prompt map {:?} does not match STB input {:?} at half resolution",
                        p.dims(),
                        x.dims()
                    )));
                }
                Some(to_channels_last(p)?)
            }
            None => None,
        };
        let mut t = to_channels_last(x)?;
        for layer in &self.layers {
            t = layer.forward(&t, prompt_map.as_ref())?;
        }
        to_channels_first(&t)
    }
}
