//! Two-stage training. Stage 1 fits the base codec with the rate-distortion
//! loss on clean patches; stage 2 freezes it and fits the latent refinement
//! module and prompt generator on noisy/clean pairs with an l1 loss through
//! the denoising decode path.
//!
//! Distortion is measured as MSE on the 0-255 scale so the standard lambda
//! table applies unchanged.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Codec;
use crate::codec::{is_addon_param, is_base_param, CodecModel, DecodeMode};
use crate::config::{ModelConfig, LAMBDAS};
use crate::entropy::{quantize, rate_bits, QuantizeMode};
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::noise::Pair;

pub const TOY_TRAIN_CONFIG: &str = include_str!("../configs/train_toy.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch: usize,
    pub patch: usize,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    /// Steps and learning rate when deriving another rate point from a
    /// trained stage-1 codec.
    #[serde(default)]
    pub finetune_steps: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f64,
    /// Steps between log records.
    #[serde(default = "one")]
    pub log_every: usize,
}

fn one() -> usize {
    1
}

fn default_finetune_lr() -> f64 {
    1e-4
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 8,
            patch: 64,
            stage1_steps: 1000,
            stage1_lr: 1e-4,
            stage2_steps: 1000,
            stage2_lr: 1e-4,
            finetune_steps: 0,
            finetune_lr: 1e-4,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn toy() -> Self {
        toml::from_str(TOY_TRAIN_CONFIG).expect("built-in training config is valid")
    }

    pub fn load(name_or_path: &str) -> Result<Self> {
        let tc: Self = match name_or_path {
            "toy" => Self::toy(),
            path => toml::from_str(&std::fs::read_to_string(path)?)?,
        };
        tc.validate()?;
        Ok(tc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 || self.log_every == 0 {
            return Err(Error::config("batch, patch and log_every must be positive"));
        }
        if !(self.stage1_lr > 0.0 && self.stage2_lr > 0.0 && self.finetune_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

/// Components of the rate-distortion objective for one batch.
#[derive(Debug, Clone)]
pub struct RdTerms {
    pub loss: Tensor,
    pub bpp_y: f64,
    pub bpp_z: f64,
    /// MSE on the 0-255 scale.
    pub mse: f64,
}

/// `bpp_z + bpp_y + lambda * MSE_255` from precomputed bpp and MSE.
pub fn rd_loss_value(mse_255: f64, bpp_y: f64, bpp_z: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(bpp_z + bpp_y + lambda * mse_255)
}

/// Differentiable RD loss. `bits_y` / `bits_z` are scalar bit totals over
/// the batch; rates are normalized by the batch pixel count.
pub fn rd_loss(x: &Tensor, x_hat: &Tensor, bits_y: &Tensor, bits_z: &Tensor, lambda: f64) -> Result<RdTerms> {
    check_lambda(lambda)?;
    if x.dims() != x_hat.dims() {
        return Err(Error::shape(format!("rd_loss: {:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    let (b, _, h, w) = x.dims4()?;
    let pixels = (b * h * w) as f64;
    let mse = ((x - x_hat)? * 255.0)?.sqr()?.mean_all()?;
    let rate = ((bits_y + bits_z)? / pixels)?;
    let loss = (rate + (&mse * lambda)?)?;
    Ok(RdTerms {
        loss,
        bpp_y: scalar(bits_y)? / pixels,
        bpp_z: scalar(bits_z)? / pixels,
        mse: scalar(&mse)?,
    })
}

/// Mean absolute error over every element.
pub fn l1_loss(clean: &Tensor, denoised: &Tensor) -> Result<Tensor> {
    if clean.dims() != denoised.dims() {
        return Err(Error::shape(format!("l1_loss: {:?} vs {:?}", clean.dims(), denoised.dims())));
    }
    Ok((clean - denoised)?.abs()?.mean_all()?)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("lambda must be positive, got {lambda}")))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage-1 objective on a batch `x` with noise-surrogate quantization.
pub fn stage1_terms(model: &CodecModel, x: &Tensor, lambda: f64, mode: QuantizeMode) -> Result<RdTerms> {
    let y = model.analyze(x)?;
    let z = model.hyper_analyze(&y)?;
    let (y_q, z_q) = match mode {
        QuantizeMode::Train { seed } => (
            quantize(&y, QuantizeMode::Train { seed })?,
            quantize(&z, QuantizeMode::Train { seed: seed ^ 0x5A5A_5A5A })?,
        ),
        QuantizeMode::Infer => (quantize(&y, mode)?, quantize(&z, mode)?),
    };
    let gp = model.hyper_synthesize(&z_q)?;
    let bits_y = rate_bits(&y_q, &gp.mu, &gp.sigma)?;
    let mz = z_q.dim(1)?;
    let scales = model.z_scales()?.reshape((1, mz, 1, 1))?;
    let bits_z = rate_bits(&z_q, &Tensor::zeros((1, 1, 1, 1), z_q.dtype(), z_q.device())?, &scales)?;
    let x_hat = model.synthesize(&y_q, None)?;
    rd_loss(x, &x_hat, &bits_y, &bits_z, lambda)
}

/// Stage-2 objective: l1 between the clean batch and the denoising decode of
/// the noisy batch's latent.
pub fn stage2_loss(model: &CodecModel, clean: &Tensor, noisy: &Tensor, mode: QuantizeMode) -> Result<Tensor> {
    let y = model.analyze(noisy)?.detach();
    let y_q = quantize(&y, mode)?;
    let x_hat = model.reconstruct(&y_q, DecodeMode::Denoise)?;
    l1_loss(clean, &x_hat)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub lambda_index: usize,
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpp: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub codec: Codec,
    pub records: Vec<StepRecord>,
}

/// Line-delimited JSON sink for step records.
struct LossLog(Option<std::io::BufWriter<std::fs::File>>);

impl LossLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        Ok(Self(match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        }))
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.0 {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        if let Some(mut f) = self.0 {
            f.flush()?;
        }
        Ok(())
    }
}

fn random_batch(images: &[&ImageTensor], patch: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let crops = (0..batch)
        .map(|_| {
            let im = images[rng.random_range(0..images.len())];
            let top = rng.random_range(0..=im.height() - patch);
            let left = rng.random_range(0..=im.width() - patch);
            im.crop_at(top, left, patch, patch)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageTensor::batch(&crops.iter().collect::<Vec<_>>(), &Device::Cpu)
}

fn optimizer(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?)
}

fn ensure_finite(step: usize, loss: f64, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, detail: format!("{what} loss became {loss}") })
    }
}

/// Trains the base codec of `cfg` (at its lambda index) from scratch.
pub fn train_stage1(cfg: &ModelConfig, tc: &TrainConfig, images: &[ImageTensor], log: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    let codec = Codec::new(cfg, tc.seed)?;
    run_stage1(codec, tc.stage1_steps, tc.stage1_lr, tc, images, log)
}

/// Continues training a stage-1 codec at another rate point. The result
/// carries the config for `lambda_index`.
pub fn finetune_stage1(
    base: Codec,
    lambda_index: usize,
    tc: &TrainConfig,
    images: &[ImageTensor],
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = base.cfg.with_lambda_index(lambda_index);
    cfg.validate()?;
    let mut store = base.store;
    let model = CodecModel::new(&cfg, &mut store)?;
    let codec = Codec { cfg, store, model, stage: base.stage };
    run_stage1(codec, tc.finetune_steps, tc.finetune_lr, tc, images, log)
}

/// One stage-1 codec per rate point: trained from scratch at the lowest
/// lambda, then fine-tuned up the table, each rung starting from the one
/// below. `log_dir` receives `stage1_lambda{i}.jsonl` per rung.
pub fn train_rate_ladder(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    images: &[ImageTensor],
    log_dir: Option<&Path>,
) -> Result<Vec<TrainOutcome>> {
    let log = |i: usize| log_dir.map(|d| d.join(format!("stage1_lambda{i}.jsonl")));
    if let Some(d) = log_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut out = vec![train_stage1(&cfg.with_lambda_index(0), tc, images, log(0).as_deref())?];
    for i in 1..LAMBDAS.len() {
        let base = out[i - 1].codec.deep_clone()?;
        out.push(finetune_stage1(base, i, tc, images, log(i).as_deref())?);
    }
    Ok(out)
}

/// Cosine decay from `lr` to `lr / 10` over `steps`.
pub fn lr_at(lr: f64, step: usize, steps: usize) -> f64 {
    let t = step as f64 / steps.max(1) as f64;
    lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * t).cos()))
}

fn run_stage1(
    mut codec: Codec,
    steps: usize,
    lr: f64,
    tc: &TrainConfig,
    images: &[ImageTensor],
    log: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = codec.cfg.clone();
    let usable: Vec<&ImageTensor> = images.iter().filter(|im| im.height() >= tc.patch && im.width() >= tc.patch).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("<training images>".into()));
    }
    if !tc.patch.is_multiple_of(cfg.pad_multiple()) {
        return Err(Error::config(format!("patch {} must be a multiple of {}", tc.patch, cfg.pad_multiple())));
    }
    let mut opt = optimizer(codec.store.trainable_vars(is_base_param), lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0001_0000);
    let mut sink = LossLog::open(log)?;
    let mut records = Vec::new();
    let lambda = cfg.lambda();
    for step in 0..steps {
        opt.set_learning_rate(lr_at(lr, step, steps));
        let x = random_batch(&usable, tc.patch, tc.batch, &mut rng)?;
        let seed = rng.random();
        let terms = stage1_terms(&codec.model, &x, lambda, QuantizeMode::Train { seed })?;
        let loss = scalar(&terms.loss)?;
        ensure_finite(step, loss, "rate-distortion")?;
        opt.backward_step(&terms.loss)?;
        if step % tc.log_every == 0 || step + 1 == steps {
            let r = StepRecord {
                stage: 1,
                lambda_index: cfg.lambda_index,
                step,
                loss,
                bpp: Some(terms.bpp_y + terms.bpp_z),
                mse: Some(terms.mse),
            };
            sink.write(&r)?;
            records.push(r);
        }
    }
    sink.finish()?;
    codec.stage = 1;
    Ok(TrainOutcome { codec, records })
}

/// Fits the add-on modules of a stage-1 codec on `pairs`, leaving every
/// base parameter bit-identical.
pub fn train_stage2(mut codec: Codec, tc: &TrainConfig, pairs: &[Pair], log: Option<&Path>) -> Result<TrainOutcome> {
    tc.validate()?;
    if !codec.cfg.has_addons() {
        return Err(Error::config("config enables neither the LRM nor prompts"));
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("<training pairs>".into()));
    }
    let size = (pairs[0].clean.height(), pairs[0].clean.width());
    if pairs.iter().any(|p| (p.clean.height(), p.clean.width()) != size || (p.noisy.height(), p.noisy.width()) != size) {
        return Err(Error::shape("training pairs must share one size"));
    }
    let pm = codec.cfg.pad_multiple();
    if !size.0.is_multiple_of(pm) || !size.1.is_multiple_of(pm) {
        return Err(Error::config(format!("pair size {}x{} must be a multiple of {pm}", size.0, size.1)));
    }
    let base_before = codec.base_hash()?;
    codec.freeze_base()?;
    let mut opt = optimizer(codec.store.trainable_vars(is_addon_param), tc.stage2_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x0002_0000);
    let mut sink = LossLog::open(log)?;
    let mut records = Vec::new();
    for step in 0..tc.stage2_steps {
        opt.set_learning_rate(lr_at(tc.stage2_lr, step, tc.stage2_steps));
        let idx: Vec<usize> = (0..tc.batch).map(|_| rng.random_range(0..pairs.len())).collect();
        let clean = ImageTensor::batch(&idx.iter().map(|&i| &pairs[i].clean).collect::<Vec<_>>(), &Device::Cpu)?;
        let noisy = ImageTensor::batch(&idx.iter().map(|&i| &pairs[i].noisy).collect::<Vec<_>>(), &Device::Cpu)?;
        let seed = rng.random();
        let loss_t = stage2_loss(&codec.model, &clean, &noisy, QuantizeMode::Train { seed })?;
        let loss = scalar(&loss_t)?;
        ensure_finite(step, loss, "l1")?;
        opt.backward_step(&loss_t)?;
        if step % tc.log_every == 0 || step + 1 == tc.stage2_steps {
            let r = StepRecord { stage: 2, lambda_index: codec.cfg.lambda_index, step, loss, bpp: None, mse: None };
            sink.write(&r)?;
            records.push(r);
        }
    }
    sink.finish()?;
    let base_after = codec.base_hash()?;
    if base_after != base_before {
        return Err(Error::Param(format!("base codec changed during stage 2 ({base_before} -> {base_after})")));
    }
    codec.stage = 2;
    Ok(TrainOutcome { codec, records })
}

/// Deterministic stage-1 objective (rounded latents) averaged over images.
pub fn validation_loss(codec: &Codec, images: &[ImageTensor]) -> Result<f64> {
    let mut total = 0.0;
    for im in images {
        let x = im.pad_reflect(codec.cfg.pad_multiple()).to_tensor(&Device::Cpu)?;
        let terms = stage1_terms(&codec.model, &x, codec.cfg.lambda(), QuantizeMode::Infer)?;
        total += scalar(&terms.loss)?;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Exponential moving average of a loss trace.
pub fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let s = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(s);
        out.push(s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rd_loss_arithmetic() {
        assert!((rd_loss_value(100.0, 0.3, 0.2, 0.013).unwrap() - 1.8).abs() < 1e-12);
        assert_eq!(rd_loss_value(0.0, 0.0, 0.0, 0.013).unwrap(), 0.0);
        assert!(rd_loss_value(1.0, 0.0, 0.0, 0.0).is_err());
        let d1 = rd_loss_value(4.0, 0.1, 0.1, 0.01).unwrap() - 0.2;
        let d2 = rd_loss_value(4.0, 0.1, 0.1, 0.02).unwrap() - 0.2;
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
    }

    #[test]
    fn rd_loss_tensor_matches_scalar() {
        let dev = Device::Cpu;
        let x = Tensor::full(0.5f32, (1, 3, 4, 4), &dev).unwrap();
        let xh = Tensor::full(0.5f32 + 10.0 / 255.0, (1, 3, 4, 4), &dev).unwrap();
        let by = Tensor::new(8.0f32, &dev).unwrap();
        let bz = Tensor::new(0.0f32, &dev).unwrap();
        let t = rd_loss(&x, &xh, &by, &bz, 0.013).unwrap();
        assert!((t.bpp_y - 0.5).abs() < 1e-9);
        assert!((t.mse - 100.0).abs() < 1e-2);
        assert!((scalar(&t.loss).unwrap() - 1.8).abs() < 1e-3);
        let same = rd_loss(&x, &x, &bz, &bz, 0.013).unwrap();
        assert_eq!(scalar(&same.loss).unwrap(), 0.0);
    }

    #[test]
    fn l1_closed_forms() {
        let dev = Device::Cpu;
        let a = Tensor::full(0.3f32, (1, 3, 2, 2), &dev).unwrap();
        assert_eq!(scalar(&l1_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let b = (&a + 0.1).unwrap();
        assert!((scalar(&l1_loss(&a, &b).unwrap()).unwrap() - 0.1).abs() < 1e-6);
        assert!(l1_loss(&a, &Tensor::zeros((1, 3, 2, 1), DType::F32, &dev).unwrap()).is_err());
    }

    #[test]
    fn toy_train_config_parses() {
        let tc = TrainConfig::toy();
        tc.validate().unwrap();
        assert_eq!(tc.patch, 64);
        assert_eq!(TrainConfig::load("toy").unwrap(), tc);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0], 0.5), vec![1.0, 2.0]);
    }
}
