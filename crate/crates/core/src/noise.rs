//! Poissonian-Gaussian noise: `z = clip(x + sqrt(a x + b) n, 0, 1)` with
//! standard normal `n`, and seeded clean/noisy patch pairs.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Signal-dependent variance slope.
    pub a: f64,
    /// Signal-independent variance.
    pub b: f64,
    pub seed: u64,
}

impl NoiseParams {
    /// Stand-in profile for a camera-like noise level.
    pub const DEFAULT_A: f64 = 0.01;
    pub const DEFAULT_B: f64 = 0.0005;

    /// Heavy profile for the toy model: lighter noise sits below the toy
    /// codec's own distortion and is largely removed by compression alone.
    pub const HEAVY_A: f64 = 0.2;
    pub const HEAVY_B: f64 = 0.05;

    pub fn new(a: f64, b: f64, seed: u64) -> Result<Self> {
        let p = Self { a, b, seed };
        p.validate()?;
        Ok(p)
    }

    pub fn default_profile(seed: u64) -> Self {
        Self { a: Self::DEFAULT_A, b: Self::DEFAULT_B, seed }
    }

    pub fn heavy_profile(seed: u64) -> Self {
        Self { a: Self::HEAVY_A, b: Self::HEAVY_B, seed }
    }

    /// Named profile: `default` or `heavy`.
    pub fn profile(name: &str, seed: u64) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_profile(seed)),
            "heavy" => Ok(Self::heavy_profile(seed)),
            other => Err(Error::Param(format!("unknown noise profile {other:?} (expected default or heavy)"))),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a.is_finite() && self.b.is_finite()) {
            return Err(Error::Param(format!("noise parameters must be finite and >= 0, got a={} b={}", self.a, self.b)));
        }
        Ok(())
    }

    pub fn variance(&self, x: f64) -> f64 {
        self.a * x + self.b
    }
}

/// Noisy values before clipping, one per input value.
pub fn noise_pre_clip(x: &[f32], p: &NoiseParams) -> Result<Vec<f64>> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    Ok(x
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            let v = v as f64;
            v + p.variance(v).max(0.0).sqrt() * n
        })
        .collect())
}

pub fn add_noise(x: &ImageTensor, p: &NoiseParams) -> Result<ImageTensor> {
    if p.a == 0.0 && p.b == 0.0 {
        p.validate()?;
        return Ok(x.clone());
    }
    let z = noise_pre_clip(x.data(), p)?;
    ImageTensor::new(x.height(), x.width(), z.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect())
}

/// One manifest line: enough to regenerate a pair exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source: PathBuf,
    pub top: usize,
    pub left: usize,
    pub patch: usize,
    pub crop_seed: u64,
    pub noise: NoiseParams,
}

#[derive(Debug, Clone)]
pub struct Pair {
    pub clean: ImageTensor,
    pub noisy: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct PairSet {
    pub records: Vec<PairRecord>,
    pub pairs: Vec<Pair>,
}

impl PairSet {
    pub fn write_manifest(&self, path: impl AsRef<Path>) -> Result<()> {
        write_manifest(&self.records, path)
    }
}

pub fn write_manifest(records: &[PairRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// PNG / PPM files in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Seeded random `patch x patch` crops from the images in `clean_dir`, each
/// paired with a noisy copy. Unreadable or too-small files are skipped with
/// a warning.
pub fn make_pairs(clean_dir: impl AsRef<Path>, params: &NoiseParams, patch: usize, count: usize) -> Result<PairSet> {
    params.validate()?;
    let dir = clean_dir.as_ref();
    let mut sources = Vec::new();
    for path in list_images(dir)? {
        match ImageTensor::load(&path) {
            Ok(im) if im.height() >= patch && im.width() >= patch => sources.push((path, im)),
            Ok(_) => log::warn!("skipping {}: smaller than {patch}x{patch}", path.display()),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if sources.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut records = Vec::with_capacity(count);
    let mut pairs = Vec::with_capacity(count);
    for i in 0..count {
        let (path, im) = &sources[i % sources.len()];
        let crop_seed: u64 = rng.random();
        let record = crop_record(path, im, patch, crop_seed, params);
        pairs.push(realize(&record, im)?);
        records.push(record);
    }
    Ok(PairSet { records, pairs })
}

/// Rebuilds the pairs listed in a manifest.
pub fn regenerate(records: &[PairRecord]) -> Result<Vec<Pair>> {
    let mut cache: Vec<(PathBuf, ImageTensor)> = Vec::new();
    records
        .iter()
        .map(|r| {
            if !cache.iter().any(|(p, _)| *p == r.source) {
                cache.push((r.source.clone(), ImageTensor::load(&r.source)?));
            }
            let im = &cache.iter().find(|(p, _)| *p == r.source).unwrap().1;
            realize(r, im)
        })
        .collect()
}

fn crop_record(path: &Path, im: &ImageTensor, patch: usize, crop_seed: u64, params: &NoiseParams) -> PairRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(crop_seed);
    let top = rng.random_range(0..=im.height() - patch);
    let left = rng.random_range(0..=im.width() - patch);
    PairRecord {
        source: path.to_path_buf(),
        top,
        left,
        patch,
        crop_seed,
        noise: params.with_seed(crop_seed ^ 0x9E37_79B9_7F4A_7C15),
    }
}

fn realize(r: &PairRecord, im: &ImageTensor) -> Result<Pair> {
    let clean = im.crop_at(r.top, r.left, r.patch, r.patch)?;
    let noisy = add_noise(&clean, &r.noise)?;
    Ok(Pair { clean, noisy })
}

/// Pairs from in-memory images, same seeding scheme as [`make_pairs`].
pub fn pairs_from_images(images: &[ImageTensor], params: &NoiseParams, patch: usize, count: usize) -> Result<Vec<Pair>> {
    params.validate()?;
    let usable: Vec<&ImageTensor> = images.iter().filter(|im| im.height() >= patch && im.width() >= patch).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset(PathBuf::from("<memory>")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..count)
        .map(|i| {
            let im = usable[i % usable.len()];
            let r = crop_record(Path::new(""), im, patch, rng.random(), params);
            realize(&r, im)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_identity() {
        let x = ImageTensor::filled(3, 3, 0.25).unwrap();
        assert_eq!(add_noise(&x, &NoiseParams::new(0.0, 0.0, 1).unwrap()).unwrap(), x);
    }

    #[test]
    fn negative_parameters_rejected() {
        assert!(matches!(NoiseParams::new(-0.1, 0.0, 0), Err(Error::Param(_))));
        assert!(NoiseParams::new(0.0, -1e-3, 0).is_err());
        let x = ImageTensor::filled(1, 1, 0.5).unwrap();
        assert!(add_noise(&x, &NoiseParams { a: -1.0, b: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn deterministic_per_seed_and_clipped() {
        let x = ImageTensor::filled(8, 8, 0.02).unwrap();
        let p = NoiseParams::new(0.02, 0.01, 5).unwrap();
        let a = add_noise(&x, &p).unwrap();
        assert_eq!(a, add_noise(&x, &p).unwrap());
        assert_ne!(a, add_noise(&x, &p.with_seed(6)).unwrap());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
