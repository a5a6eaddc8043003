//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Training criteria share one run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use candle_core::DType;
use common::{flat, gradcheck, max_abs_diff, randn};
use jdnd::attention::{attention_probs, pstb_attention, wmsa, AttentionWeights};
use jdnd::complexity::{conv_count, count_complexity, Variant};
use jdnd::config::StbShape;
use jdnd::entropy::{range_decode, range_encode, Bitstream, GaussianCdf};
use jdnd::eval::{evaluate_pairs, mean_psnr, psnr};
use jdnd::lrm::Sft;
use jdnd::nn::ConvSpec;
use jdnd::noise::{noise_pre_clip, pairs_from_images, NoiseParams};
use jdnd::pipeline::{decode_image, encode_image};
use jdnd::stb::Stb;
use jdnd::synth::{synthetic_image, synthetic_set};
use jdnd::training::{train_rate_ladder, train_stage2, TrainConfig, TrainOutcome};
use jdnd::{Codec, DecodeMode, ModelConfig, ParamStore};
use rand::Rng;
use rand_distr::{Distribution, Normal};

// Tolerances
const ROUND_TRIP_SYMBOLS: usize = 1_000_000;
const CODED_SIZE_REL: f64 = 0.01;
const CODED_SIZE_ABS_BYTES: f64 = 64.0;
const PSTB_TOL: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;
const NOISE_REL_TOL: f64 = 0.10;
const LOSS_SEGMENTS: usize = 8;
const DENOISE_GAIN_DB: f64 = 0.5;
const TRAIN_IMAGES: usize = 48;
const HELD_OUT_PATCHES: usize = 16;
const STEP_BUDGET: usize = 2000;
const TIME_BUDGET_S: f64 = 1800.0;

type Outcome = (bool, String);

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let (pass, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        (false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    println!(
        "criterion {id} ({name}): {} [{:.1}s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    pass
}

fn dual_mode() -> Outcome {
    let codec = Codec::new(&ModelConfig::toy(), 7).unwrap();
    let sizes = [(64, 64), (50, 37), (96, 128), (64, 70), (33, 90)];
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let bytes = encode_image(&codec, &synthetic_image(h, w, 100 + i as u64)).unwrap().bitstream.to_bytes();
        let s = decode_image(&codec, &Bitstream::from_bytes(&bytes).unwrap(), DecodeMode::Standard).unwrap();
        let d = decode_image(&codec, &Bitstream::from_bytes(&bytes).unwrap(), DecodeMode::Denoise).unwrap();
        let same = flat(&s.y_hat).iter().zip(flat(&d.y_hat)).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || (s.image.height(), s.image.width()) != (h, w) {
            return (false, format!("{h}x{w}: latents differ or size wrong"));
        }
    }
    (true, format!("{} images, y_hat bit-identical across modes", sizes.len()))
}

fn entropy_transport() -> Outcome {
    let mut rng = common::rng(2024);
    let params: Vec<(f64, f64)> =
        (0..ROUND_TRIP_SYMBOLS).map(|_| (rng.random_range(-20.0..20.0), rng.random_range(0.05..30.0))).collect();
    let symbols: Vec<i32> = params
        .iter()
        .map(|&(mu, sigma)| {
            if rng.random_bool(0.001) {
                rng.random_range(-2000..2000)
            } else {
                (mu + sigma * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).round() as i32
            }
        })
        .collect();
    let provider = |i: usize| GaussianCdf::new(params[i].0, params[i].1);
    let bytes = range_encode(&symbols, &provider).unwrap();
    if range_decode(&bytes, &provider, symbols.len()).unwrap() != symbols {
        return (false, "10^6-symbol round trip mismatch".into());
    }
    let codec = Codec::new(&ModelConfig::toy(), 3).unwrap();
    let mut worst = f64::MIN;
    for seed in 0..100u64 {
        let enc = encode_image(&codec, &synthetic_image(64, 64, 2000 + seed)).unwrap();
        let actual = 8.0 * (enc.bitstream.y_payload.len() + enc.bitstream.z_payload.len()) as f64;
        let model = enc.model_bits_y + enc.model_bits_z;
        let slack = (actual - model).abs() - (CODED_SIZE_REL * model + 8.0 * CODED_SIZE_ABS_BYTES);
        worst = worst.max(slack);
    }
    (
        worst <= 0.0,
        format!("{ROUND_TRIP_SYMBOLS} symbols exact ({} bytes); 100 latents, worst margin {:.1} bits", bytes.len(), -worst),
    )
}

fn prompt_reduction() -> Outcome {
    let mut store = ParamStore::new(5, DType::F32);
    let shape = StbShape { channels: 32, depth: 2, heads: 4, factor: 1 };
    let pstb = Stb::new(&mut store, "blk", shape, 8, 2, Some("blk.prompt_bias")).unwrap();
    let plain = Stb::new(&mut store, "blk", shape, 8, 2, None).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let x = randn(&[1, 32, 16, 16], 10_000 + seed, DType::F32);
        worst = worst.max(max_abs_diff(&pstb.forward(&x, None).unwrap(), &plain.forward(&x, None).unwrap()));
    }
    let w = AttentionWeights::from_parts(
        randn(&[32, 32], 1, DType::F32),
        randn(&[32, 32], 2, DType::F32),
        randn(&[32, 32], 3, DType::F32),
        randn(&[225, 4], 4, DType::F32),
        4,
        8,
    )
    .unwrap();
    let f = randn(&[6, 64, 32], 5, DType::F32);
    let p = randn(&[6, 16, 32], 6, DType::F32);
    worst = worst.max(max_abs_diff(&pstb_attention(&f, None, &w, None).unwrap(), &wmsa(&f, &w).unwrap()));
    let probs = attention_probs(&f, Some(&p), &w, None).unwrap();
    let row_err = flat(&probs.sum(3).unwrap()).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let cols = probs.dims()[3];
    (
        worst <= PSTB_TOL && row_err <= PSTB_TOL && cols == 64 + 64 / 4,
        format!("max |P-STB - STB| {worst:.2e}, row-sum error {row_err:.2e}, K/V rows {cols} for N=64"),
    )
}

fn lrm_identity() -> Outcome {
    let codec = Codec::new(&ModelConfig::toy(), 11).unwrap();
    let mut exact = true;
    for seed in 0..5u64 {
        let enc = encode_image(&codec, &synthetic_image(64, 64, 300 + seed)).unwrap();
        let refined = codec.model.refine(&enc.y_hat).unwrap();
        exact &= flat(&refined).iter().zip(flat(&enc.y_hat)).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let mut store = ParamStore::new(12, DType::F64);
    let sft = Sft::new(&mut store, "s", 8, 4).unwrap();
    let sft_err = gradcheck(&randn(&[1, 8, 4, 4], 13, DType::F64), |t| sft.forward(t).unwrap(), 14);
    let w = AttentionWeights::from_parts(
        randn(&[4, 4], 15, DType::F64),
        randn(&[4, 4], 16, DType::F64),
        randn(&[4, 4], 17, DType::F64),
        randn(&[9, 2], 18, DType::F64),
        2,
        2,
    )
    .unwrap();
    let wmsa_err = gradcheck(&randn(&[2, 4, 4], 19, DType::F64), |t| wmsa(t, &w).unwrap(), 20);
    (
        exact && sft_err < GRAD_REL_TOL && wmsa_err < GRAD_REL_TOL,
        format!("refine(y_hat) == y_hat: {exact}; grad rel. error SFT {sft_err:.1e}, W-MSA {wmsa_err:.1e}"),
    )
}

fn noise_statistics() -> Outcome {
    let (a, b) = (NoiseParams::DEFAULT_A, NoiseParams::DEFAULT_B);
    let levels: Vec<f32> = (0..20).map(|i| (i as f32 + 0.5) / 20.0).collect();
    let per = 50_000;
    let x: Vec<f32> = levels.iter().flat_map(|&l| std::iter::repeat_n(l, per)).collect();
    let z = noise_pre_clip(&x, &NoiseParams::new(a, b, 77).unwrap()).unwrap();
    let vars: Vec<f64> = z
        .chunks(per)
        .zip(&levels)
        .map(|(c, &l)| c.iter().map(|v| (v - l as f64).powi(2)).sum::<f64>() / per as f64)
        .collect();
    let xs: Vec<f64> = levels.iter().map(|&l| l as f64).collect();
    let n = xs.len() as f64;
    let (mx, mv) = (xs.iter().sum::<f64>() / n, vars.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&vars).map(|(x, v)| (x - mx) * (v - mv)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let intercept = mv - slope * mx;
    let (ea, eb) = ((slope - a).abs() / a, (intercept - b).abs() / b);
    (
        ea <= NOISE_REL_TOL && eb <= NOISE_REL_TOL,
        format!("{} samples: a {slope:.5} vs {a} ({:.1}%), b {intercept:.6} vs {b} ({:.1}%)", x.len(), ea * 100.0, eb * 100.0),
    )
}

struct TrainingRun {
    ladder: Vec<TrainOutcome>,
    stage2: Result<(f64, f64, bool, usize), String>,
    seconds: f64,
}

fn training_run() -> TrainingRun {
    let start = Instant::now();
    let cfg = ModelConfig::toy();
    let tc = TrainConfig::toy();
    let images = synthetic_set(TRAIN_IMAGES, 96, 96, 1);
    let ladder = train_rate_ladder(&cfg, &tc, &images, None).expect("stage-1 ladder");
    let stage2 = (|| {
        let top = ladder.last().unwrap().codec.deep_clone().map_err(|e| e.to_string())?;
        let base = top.base_hash().map_err(|e| e.to_string())?;
        let pairs = pairs_from_images(&images, &NoiseParams::heavy_profile(1), tc.patch, tc.stage2_steps * tc.batch)
            .map_err(|e| e.to_string())?;
        let out = train_stage2(top, &tc, &pairs, None).map_err(|e| e.to_string())?;
        let held = synthetic_set(HELD_OUT_PATCHES, 96, 96, 5000);
        let test = pairs_from_images(&held, &NoiseParams::heavy_profile(99), tc.patch, HELD_OUT_PATCHES)
            .map_err(|e| e.to_string())?;
        let pts = evaluate_pairs(&out.codec, &test).map_err(|e| e.to_string())?;
        let unchanged = out.codec.base_hash().map_err(|e| e.to_string())? == base;
        Ok((mean_psnr(&pts, "standard").unwrap(), mean_psnr(&pts, "denoise").unwrap(), unchanged, test.len()))
    })();
    TrainingRun { ladder, stage2, seconds: start.elapsed().as_secs_f64() }
}

fn training_efficacy(run: &TrainingRun) -> Outcome {
    let tc = TrainConfig::toy();
    let steps = tc.stage1_steps + 3 * tc.finetune_steps + tc.stage2_steps;
    let losses: Vec<f64> = run.ladder[0].records.iter().map(|r| r.loss).collect();
    let seg = losses.len() / LOSS_SEGMENTS;
    let means: Vec<f64> = losses.chunks(seg).take(LOSS_SEGMENTS).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let decreasing = means.windows(2).all(|w| w[1] < w[0]);
    let trace = means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" > ");
    match &run.stage2 {
        Err(e) => (false, format!("stage 2 failed: {e}")),
        Ok((std_db, den_db, unchanged, n)) => (
            decreasing
                && den_db - std_db >= DENOISE_GAIN_DB
                && *unchanged
                && steps <= STEP_BUDGET
                && run.seconds <= TIME_BUDGET_S,
            format!(
                "stage-1 loss segment means {trace}; {n} held-out patches: standard {std_db:.3} dB, denoise {den_db:.3} dB \
                 (gain {:.3}); base hash unchanged: {unchanged}; {steps} steps, {:.0}s",
                den_db - std_db,
                run.seconds
            ),
        ),
    }
}

fn complexity() -> Outcome {
    let conv = conv_count(ConvSpec::new(16, 32, 3), 64, 64).macs;
    let grouped = conv_count(ConvSpec::new(16, 32, 3).groups(16), 64, 64).macs;
    let cfg = ModelConfig::large();
    let r = |v| count_complexity(&cfg, 256, 256, v).unwrap();
    let (full, light) = (r(Variant::Full), r(Variant::Light));
    let (ll, l, p, ph) = (r(Variant::LrmLight), r(Variant::Lrm), r(Variant::Prompt), r(Variant::PromptHeavy));
    let ranges = (20.0..=35.0).contains(&full.params_overhead_pct)
        && (8.0..=14.0).contains(&full.macs_overhead_pct)
        && (9.0..=15.0).contains(&light.params_overhead_pct)
        && (7.0..=13.0).contains(&light.macs_overhead_pct);
    // parameters: Prompt < LRM-light < LRM < Prompt-heavy
    let params_order = p.total_params < ll.total_params && ll.total_params < l.total_params && l.total_params < ph.total_params;
    let macs_order = l.kmacs_per_pixel < p.kmacs_per_pixel && p.kmacs_per_pixel < ph.kmacs_per_pixel;
    (
        conv == 18_874_368 && grouped * 16 == conv && ranges && params_order && macs_order,
        format!(
            "conv {conv} MACs, grouped {grouped}; full +{:.1}% params / +{:.1}% MACs; light +{:.1}% / +{:.1}%; \
             kMACs/px LRM {:.2} < Prompt {:.2} < Prompt-heavy {:.2}",
            full.params_overhead_pct,
            full.macs_overhead_pct,
            light.params_overhead_pct,
            light.macs_overhead_pct,
            l.kmacs_per_pixel,
            p.kmacs_per_pixel,
            ph.kmacs_per_pixel
        ),
    )
}

fn lambda_sweep(run: &TrainingRun) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let image = synthetic_image(128, 128, 10_000);
    let mut points = Vec::new();
    for (i, o) in run.ladder.iter().enumerate() {
        let path = dir.path().join(format!("stage1_lambda{i}.safetensors"));
        o.codec.save(&path).unwrap();
        let codec = Codec::load(&path).unwrap();
        let enc = encode_image(&codec, &image).unwrap();
        let dec = decode_image(&codec, &enc.bitstream, DecodeMode::Standard).unwrap();
        points.push((codec.cfg.lambda_index, enc.bpp, psnr(&image, &dec.image).unwrap()));
    }
    let indices_ok = points.iter().enumerate().all(|(i, p)| p.0 == i);
    let bpp_up = points.windows(2).all(|w| w[1].1 > w[0].1);
    let psnr_up = points.windows(2).all(|w| w[1].2 >= w[0].2);
    let desc = points.iter().map(|(i, b, p)| format!("λ{i}: {b:.4} bpp {p:.3} dB")).collect::<Vec<_>>().join(", ");
    (points.len() == 4 && indices_ok && bpp_up && psnr_up, desc)
}

fn main() {
    let mut ok = true;
    ok &= run(1, "single-bitstream dual-mode", dual_mode);
    ok &= run(2, "lossless entropy transport", entropy_transport);
    ok &= run(3, "prompt-reduction equivalence", prompt_reduction);
    ok &= run(4, "LRM identity and gradients", lrm_identity);
    ok &= run(5, "noise-model statistics", noise_statistics);
    let start = Instant::now();
    let training = catch_unwind(training_run);
    println!("training run finished in {:.0}s", start.elapsed().as_secs_f64());
    match &training {
        Ok(run_) => {
            ok &= run(6, "desk-scale training efficacy", || training_efficacy(run_));
        }
        Err(_) => {
            println!("criterion 6 (desk-scale training efficacy): FAIL training panicked");
            ok = false;
        }
    }
    ok &= run(7, "complexity counters", complexity);
    match &training {
        Ok(run_) => ok &= run(8, "lambda sweep", || lambda_sweep(run_)),
        Err(_) => {
            println!("criterion 8 (lambda sweep): FAIL training panicked");
            ok = false;
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
