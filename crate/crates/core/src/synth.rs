//! Procedural test images: smooth color gradients overlaid with flat shapes
//! and mild sinusoidal texture. Deterministic per seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imageio::ImageTensor;

pub fn synthetic_image(height: usize, width: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut color = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1, c2) = (color(), color(), color());
    let mut data = vec![0f32; height * width * 3];
    for r in 0..height {
        for c in 0..width {
            let u = r as f32 / height.max(2) as f32;
            let v = c as f32 / width.max(2) as f32;
            for k in 0..3 {
                data[(r * width + c) * 3 + k] = c0[k] * (1.0 - u) * (1.0 - v) + c1[k] * u + c2[k] * v * (1.0 - u);
            }
        }
    }
    let shapes = rng.random_range(3..8);
    for _ in 0..shapes {
        let fill = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let cy = rng.random_range(0.0..height as f32);
        let cx = rng.random_range(0.0..width as f32);
        let ry = rng.random_range(3.0..(height as f32 / 3.0).max(4.0));
        let rx = rng.random_range(3.0..(width as f32 / 3.0).max(4.0));
        let disc = rng.random_bool(0.5);
        for r in 0..height {
            for c in 0..width {
                let dy = (r as f32 - cy) / ry;
                let dx = (c as f32 - cx) / rx;
                let inside = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    data[(r * width + c) * 3..][..3].copy_from_slice(&fill);
                }
            }
        }
    }
    let (fy, fx, amp) = (rng.random_range(0.05..0.25f32), rng.random_range(0.05..0.25f32), rng.random_range(0.0..0.05f32));
    for r in 0..height {
        for c in 0..width {
            let t = amp * ((r as f32 * fy).sin() * (c as f32 * fx).cos());
            for k in 0..3 {
                let v = &mut data[(r * width + c) * 3 + k];
                *v = (*v + t).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(height, width, data).expect("synthetic image is well formed")
}

/// `count` images seeded `seed, seed + 1, ...`.
pub fn synthetic_set(count: usize, height: usize, width: usize, seed: u64) -> Vec<ImageTensor> {
    (0..count as u64).map(|i| synthetic_image(height, width, seed + i)).collect()
}

/// Writes a synthetic set as `img_XXXX.png` into `dir`.
pub fn write_synthetic_set(dir: impl AsRef<Path>, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    synthetic_set(count, height, width, seed)
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let p = dir.join(format!("img_{i:04}.png"));
            im.save(&p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(32, 40, 11);
        assert_eq!(a, synthetic_image(32, 40, 11));
        assert_ne!(a, synthetic_image(32, 40, 12));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
