//! Window multi-head self-attention, optionally with prompt tokens appended
//! to the key/value set.
//!
//! Per head: `softmax(Q K^T / sqrt(d) + B) V` with `Q = F W_Q`. With prompts
//! `P`, keys and values become `[F; P] W_K` and `[F; P] W_V` while queries stay
//! `F W_Q`, so prompts are read but never updated. Prompt columns get a zero
//! bias unless a learnable per-head prompt bias is supplied.

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::softmax_last;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `((2 * window - 1)^2, heads)` table indexed by relative offset.
    pub bias_table: Tensor,
    pub heads: usize,
    pub window: usize,
    rel_index: Tensor,
}

impl AttentionWeights {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, heads: usize, window: usize) -> Result<Self> {
        let init = Init::fan_in(channels);
        let w_q = store.get_or_init(&format!("{prefix}.w_q"), &[channels, channels], init)?;
        let w_k = store.get_or_init(&format!("{prefix}.w_k"), &[channels, channels], init)?;
        let w_v = store.get_or_init(&format!("{prefix}.w_v"), &[channels, channels], init)?;
        let side = 2 * window - 1;
        let bias_table = store.get_or_init(&format!("{prefix}.rel_bias"), &[side * side, heads], Init::Normal(0.02))?;
        Self::from_parts(w_q, w_k, w_v, bias_table, heads, window)
    }

    pub fn from_parts(
        w_q: Tensor,
        w_k: Tensor,
        w_v: Tensor,
        bias_table: Tensor,
        heads: usize,
        window: usize,
    ) -> Result<Self> {
        let c = w_q.dim(0)?;
        for w in [&w_q, &w_k, &w_v] {
            if w.dims() != [c, c] {
                return Err(Error::shape(format!("projection {:?} is not {c}x{c}", w.dims())));
            }
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!("{c} channels not divisible by {heads} heads")));
        }
        let side = 2 * window - 1;
        if bias_table.dims() != [side * side, heads] {
            return Err(Error::shape(format!("bias table {:?}, expected [{}, {heads}]", bias_table.dims(), side * side)));
        }
        let rel_index = Tensor::from_vec(relative_position_index(window), window.pow(4), w_q.device())?;
        Ok(Self { w_q, w_k, w_v, bias_table, heads, window, rel_index })
    }

    pub fn channels(&self) -> usize {
        self.w_q.dims()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    /// The `(heads, N, N)` positional bias gathered from the table.
    pub fn position_bias(&self) -> Result<Tensor> {
        let n = self.window * self.window;
        let b = self.bias_table.index_select(&self.rel_index, 0)?;
        Ok(b.reshape((n, n, self.heads))?.permute((2, 0, 1))?.contiguous()?)
    }
}

/// Row-major `(N*N)` table of indices into the relative-bias table.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let side = 2 * window - 1;
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / window, i % window);
        for j in 0..n {
            let (rj, cj) = (j / window, j % window);
            let dr = ri + window - 1 - rj;
            let dc = ci + window - 1 - cj;
            idx.push((dr * side + dc) as u32);
        }
    }
    idx
}

/// Plain window attention over `(B_w, N, C)` tokens. Returns concatenated head
/// outputs `(B_w, N, C)` (no output projection).
pub fn wmsa(tokens: &Tensor, wts: &AttentionWeights) -> Result<Tensor> {
    attend(tokens, None, wts, None).map(|(out, _)| out)
}

/// Prompt-augmented window attention. `prompts` is `(B_w, N/4, C)`; `None`
/// reduces to [`wmsa`].
pub fn pstb_attention(
    tokens: &Tensor,
    prompts: Option<&Tensor>,
    wts: &AttentionWeights,
    prompt_bias: Option<&Tensor>,
) -> Result<Tensor> {
    attend(tokens, prompts, wts, prompt_bias).map(|(out, _)| out)
}

/// Attention probabilities `(B_w, heads, N, N + N_p)`, exposed for checking
/// normalization and the key/value row count.
pub fn attention_probs(
    tokens: &Tensor,
    prompts: Option<&Tensor>,
    wts: &AttentionWeights,
    prompt_bias: Option<&Tensor>,
) -> Result<Tensor> {
    attend(tokens, prompts, wts, prompt_bias).map(|(_, p)| p)
}

fn attend(
    tokens: &Tensor,
    prompts: Option<&Tensor>,
    wts: &AttentionWeights,
    prompt_bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let n = tokens.dim(1)?;
    if n != wts.window * wts.window {
        return Err(Error::shape(format!("{n} tokens per window, expected {}", wts.window * wts.window)));
    }
    if let Some(p) = prompts {
        let np = p.dim(1)?;
        if n % 4 != 0 || np != n / 4 {
            return Err(Error::Adapter(format!("{np} prompt rows per window, expected N/4 = {} (N = {n})", n / 4)));
        }
    }
    attention_with_bias(tokens, prompts, &wts.w_q, &wts.w_k, &wts.w_v, wts.heads, &wts.position_bias()?, prompt_bias)
}

/// Attention core for any token count `N` and any number of prompt rows:
/// `tokens` `(B_w, N, C)`, `prompts` `(B_w, N_p, C)`, `bias` `(heads, N, N)`.
/// Returns the output `(B_w, N, C)` and probabilities `(B_w, heads, N, N +
/// N_p)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_with_bias(
    tokens: &Tensor,
    prompts: Option<&Tensor>,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    heads: usize,
    bias: &Tensor,
    prompt_bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (bw, n, c) = tokens.dims3()?;
    if c != w_q.dim(0)? || heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("tokens have {c} channels, weights {:?} with {heads} heads", w_q.dims())));
    }
    if bias.dims() != [heads, n, n] {
        return Err(Error::shape(format!("bias {:?}, expected [{heads}, {n}, {n}]", bias.dims())));
    }
    ensure_finite(tokens, "attention input")?;
    let (h, d) = (heads, c / heads);

    let kv_src = match prompts {
        None => tokens.clone(),
        Some(p) => {
            let (pb, _, pc) = p.dims3()?;
            if pb != bw || pc != c {
                return Err(Error::Adapter(format!("prompt windows {:?} do not match tokens {:?}", p.dims(), tokens.dims())));
            }
            ensure_finite(p, "prompt tokens")?;
            Tensor::cat(&[tokens, p], 1)?
        }
    };
    let nk = kv_src.dim(1)?;

    let split = |x: Tensor, rows: usize| -> Result<Tensor> {
        Ok(x.reshape((bw, rows, h, d))?.transpose(1, 2)?.contiguous()?)
    };
    let q = split(project(tokens, w_q)?, n)?;
    let k = split(project(&kv_src, w_k)?, nk)?;
    let v = split(project(&kv_src, w_v)?, nk)?;

    let logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    let bias = if nk > n {
        let extra = match prompt_bias {
            Some(pb) => pb.reshape((h, 1, 1))?.broadcast_as((h, n, nk - n))?.contiguous()?,
            None => Tensor::zeros((h, n, nk - n), bias.dtype(), bias.device())?,
        };
        Tensor::cat(&[bias, &extra], 2)?
    } else {
        bias.clone()
    };
    let logits = logits.broadcast_add(&bias.unsqueeze(0)?)?;
    let probs = softmax_last(&logits)?;
    let out = probs.matmul(&v)?.transpose(1, 2)?.reshape((bw, n, c))?;
    Ok((out, probs))
}

fn project(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b * n, c))?.matmul(w)?.reshape((b, n, w.dim(1)?))?)
}

fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    let s = x.detach().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}
