//! `jdnd`: train, encode, decode, evaluate and size the codec.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage error, 3 missing file,
//! 4 config-hash mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jdnd::complexity::{count_complexity, Variant};
use jdnd::entropy::Bitstream;
use jdnd::eval::{evaluate_pairs, export_rd, mean_psnr};
use jdnd::noise::{make_pairs, read_manifest, regenerate, NoiseParams};
use jdnd::pipeline::{decode_image, encode_image};
use jdnd::synth::{synthetic_set, write_synthetic_set};
use jdnd::training::{train_rate_ladder, train_stage1, train_stage2, TrainConfig};
use jdnd::{Codec, DecodeMode, Error, ImageTensor, ModelConfig};
use serde_json::json;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_HASH: u8 = 4;

#[derive(Parser)]
#[command(name = "jdnd", version, about = "Learned image codec with standard and denoising decode modes")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,

    /// Directory that relative `--model` paths are resolved against.
    #[arg(long, global = true, env = "JDND_MODEL_DIR")]
    model_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 (base codec, one checkpoint per rate point) or stage 2
    /// (denoising add-ons on top of stage-1 checkpoints).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Training config: `toy` or a TOML file.
        #[arg(long, default_value = "toy")]
        config: String,
        /// Model config: `toy`, `large` or a TOML file.
        #[arg(long, default_value = "toy")]
        model_config: String,
        /// Directory of clean training images; synthetic images when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for checkpoints and loss logs.
        #[arg(long)]
        out: PathBuf,
        /// Stage 1: train only this rate point from scratch.
        #[arg(long)]
        lambda_index: Option<usize>,
        /// Stage 2: directory holding `stage1_lambda{i}.safetensors`, or one
        /// checkpoint. Defaults to `--out`.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Stage 2 noise profile.
        #[arg(long, default_value = "heavy")]
        noise: String,
    },
    /// Encode an image into a bitstream.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream into an image.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Standard)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score both decode modes on a pair manifest; writes CSV and SVG.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic decoder-side parameter and MAC counts.
    Complexity {
        /// Model config: `toy`, `large` or a TOML file.
        #[arg(long, default_value = "large")]
        config: String,
        /// Input size as `HxW`.
        #[arg(long, default_value = "256x256", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Cut seeded noisy/clean pairs from a directory of clean images.
    Pairs {
        #[arg(long)]
        clean: PathBuf,
        /// Manifest path (one JSON record per line).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        patch: usize,
        #[arg(long, default_value = "heavy")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write procedural test images as PNG.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value = "96x96", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    Denoise,
}

impl From<Mode> for DecodeMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Standard => DecodeMode::Standard,
            Mode::Denoise => DecodeMode::Denoise,
        }
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err("size must be positive".into());
    }
    Ok((h, w))
}

enum Failure {
    Missing(PathBuf),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn require(path: &Path) -> CliResult<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Failure::Missing(path.to_path_buf()))
    }
}

struct Ctx {
    json: bool,
    model_dir: Option<PathBuf>,
}

impl Ctx {
    fn model_path(&self, p: &Path) -> PathBuf {
        match &self.model_dir {
            Some(dir) if p.is_relative() && !p.exists() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn load(&self, p: &Path) -> CliResult<Codec> {
        let path = self.model_path(p);
        Ok(Codec::load(require(&path)?)?)
    }

    fn report(&self, value: serde_json::Value, text: String) {
        if self.json {
            println!("{value}");
        } else {
            println!("{text}");
        }
    }
}

fn training_images(data: Option<&Path>, patch: usize) -> CliResult<Vec<ImageTensor>> {
    match data {
        None => Ok(synthetic_set(48, 96, 96, 1)),
        Some(dir) => {
            let mut images = Vec::new();
            for path in jdnd::noise::list_images(require(dir)?)? {
                match ImageTensor::load(&path) {
                    Ok(im) if im.height() >= patch && im.width() >= patch => images.push(im),
                    Ok(_) => log::warn!("skipping {}: smaller than {patch}x{patch}", path.display()),
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
            if images.is_empty() {
                return Err(Error::EmptyDataset(dir.to_path_buf()).into());
            }
            Ok(images)
        }
    }
}

fn stage1_checkpoints(init: &Path) -> CliResult<Vec<PathBuf>> {
    require(init)?;
    if init.is_file() {
        return Ok(vec![init.to_path_buf()]);
    }
    let found: Vec<PathBuf> = (0..jdnd::config::LAMBDAS.len())
        .map(|i| init.join(format!("stage1_lambda{i}.safetensors")))
        .filter(|p| p.exists())
        .collect();
    if found.is_empty() {
        return Err(Failure::Missing(init.join("stage1_lambda*.safetensors")));
    }
    Ok(found)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Ctx,
    stage: u8,
    config: &str,
    model_config: &str,
    data: Option<&Path>,
    out: &Path,
    lambda_index: Option<usize>,
    init: Option<&Path>,
    noise: &str,
) -> CliResult {
    let tc = TrainConfig::load(config)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let images = training_images(data, tc.patch)?;
    let mut written = Vec::new();
    if stage == 1 {
        let cfg = ModelConfig::load(model_config)?;
        let outcomes = match lambda_index {
            Some(i) => {
                let log = out.join(format!("stage1_lambda{i}.jsonl"));
                vec![train_stage1(&cfg.with_lambda_index(i), &tc, &images, Some(&log))?]
            }
            None => train_rate_ladder(&cfg, &tc, &images, Some(out))?,
        };
        for o in outcomes {
            let path = out.join(format!("stage1_lambda{}.safetensors", o.codec.cfg.lambda_index));
            o.codec.save(&path)?;
            log::info!("wrote {} (final loss {:.4})", path.display(), o.records.last().map_or(f64::NAN, |r| r.loss));
            written.push(path);
        }
    } else {
        let noise = NoiseParams::profile(noise, tc.seed)?;
        let pairs = jdnd::noise::pairs_from_images(&images, &noise, tc.patch, tc.stage2_steps * tc.batch)?;
        for ckpt in stage1_checkpoints(init.unwrap_or(out))? {
            let codec = Codec::load(&ckpt)?;
            let i = codec.cfg.lambda_index;
            let log = out.join(format!("stage2_lambda{i}.jsonl"));
            let o = train_stage2(codec, &tc, &pairs, Some(&log))?;
            let path = out.join(format!("stage2_lambda{i}.safetensors"));
            o.codec.save(&path)?;
            log::info!("wrote {}", path.display());
            written.push(path);
        }
    }
    let names: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
    ctx.report(json!({ "stage": stage, "checkpoints": names }), names.join("\n"));
    Ok(())
}

fn cmd_encode(ctx: &Ctx, model: &Path, input: &Path, out: &Path) -> CliResult {
    let codec = ctx.load(model)?;
    let image = ImageTensor::load(require(input)?)?;
    let enc = encode_image(&codec, &image)?;
    enc.bitstream.write(out)?;
    ctx.report(
        json!({ "bytes": enc.bitstream.total_bytes(), "bpp": enc.bpp, "height": image.height(), "width": image.width() }),
        format!("{} bytes, {:.4} bpp", enc.bitstream.total_bytes(), enc.bpp),
    );
    Ok(())
}

fn cmd_decode(ctx: &Ctx, model: &Path, input: &Path, mode: DecodeMode, out: &Path) -> CliResult {
    let codec = ctx.load(model)?;
    let bs = Bitstream::read(require(input)?)?;
    let dec = decode_image(&codec, &bs, mode)?;
    dec.image.save(out)?;
    ctx.report(
        json!({ "mode": mode.to_string(), "height": dec.image.height(), "width": dec.image.width(), "out": out }),
        format!("{mode}: {}x{} -> {}", dec.image.height(), dec.image.width(), out.display()),
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx, model: &Path, pairs: &Path, out: &Path) -> CliResult {
    let codec = ctx.load(model)?;
    let records = read_manifest(require(pairs)?)?;
    let pairs = regenerate(&records)?;
    let points = evaluate_pairs(&codec, &pairs)?;
    let plot = export_rd(&points, out)?;
    let mean_bpp = points.iter().map(|p| p.bpp).sum::<f64>() / points.len() as f64;
    let std_db = mean_psnr(&points, "standard");
    let den_db = mean_psnr(&points, "denoise");
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3} dB"));
    ctx.report(
        json!({ "pairs": pairs.len(), "bpp": mean_bpp, "psnr_standard": std_db, "psnr_denoise": den_db, "csv": out, "plot": plot }),
        format!("{} pairs, {mean_bpp:.4} bpp, standard {}, denoise {}", pairs.len(), fmt(std_db), fmt(den_db)),
    );
    Ok(())
}

fn cmd_complexity(ctx: &Ctx, config: &str, size: (usize, usize), variant: &str) -> CliResult {
    let cfg = ModelConfig::load(config)?;
    let variant: Variant = variant.parse()?;
    let r = count_complexity(&cfg, size.0, size.1, variant)?;
    if ctx.json {
        println!("{}", r.to_json());
        return Ok(());
    }
    println!("config {} variant {} at {}x{}", r.config, r.variant, r.height, r.width);
    for m in &r.modules {
        println!("  {:<8} params {:>10}  MACs {:>14}", m.name, m.params, m.macs);
    }
    println!("total params {:.3} M ({:+.1}%)", r.params_millions(), r.params_overhead_pct);
    println!("kMACs/pixel {:.2} ({:+.1}%)", r.kmacs_per_pixel, r.macs_overhead_pct);
    Ok(())
}

fn cmd_pairs(ctx: &Ctx, clean: &Path, out: &Path, count: usize, patch: usize, noise: &str, seed: u64) -> CliResult {
    let params = NoiseParams::profile(noise, seed)?;
    let set = make_pairs(require(clean)?, &params, patch, count)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    set.write_manifest(out)?;
    ctx.report(json!({ "pairs": set.records.len(), "manifest": out }), format!("{} pairs -> {}", set.records.len(), out.display()));
    Ok(())
}

fn cmd_synth(ctx: &Ctx, out: &Path, count: usize, size: (usize, usize), seed: u64) -> CliResult {
    let paths = write_synthetic_set(out, count, size.0, size.1, seed)?;
    ctx.report(json!({ "images": paths.len(), "dir": out }), format!("{} images -> {}", paths.len(), out.display()));
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let ctx = Ctx { json: cli.json, model_dir: cli.model_dir };
    match cli.command {
        Command::Train { stage, config, model_config, data, out, lambda_index, init, noise } => cmd_train(
            &ctx,
            stage,
            &config,
            &model_config,
            data.as_deref(),
            &out,
            lambda_index,
            init.as_deref(),
            &noise,
        ),
        Command::Encode { model, input, out } => cmd_encode(&ctx, &model, &input, &out),
        Command::Decode { model, input, mode, out } => cmd_decode(&ctx, &model, &input, mode.into(), &out),
        Command::Eval { model, pairs, out } => cmd_eval(&ctx, &model, &pairs, &out),
        Command::Complexity { config, size, variant } => cmd_complexity(&ctx, &config, size, &variant),
        Command::Pairs { clean, out, count, patch, noise, seed } => cmd_pairs(&ctx, &clean, &out, count, patch, &noise, seed),
        Command::Synth { out, count, size, seed } => cmd_synth(&ctx, &out, count, size, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Missing(p)) => {
            eprintln!("error: file not found: {}", p.display());
            ExitCode::from(EXIT_MISSING)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::HashMismatch { .. } => EXIT_HASH,
                Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
                _ => EXIT_OTHER,
            })
        }
    }
}
