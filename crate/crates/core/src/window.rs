//! Window partitioning for shifted-window attention.
//!
//! Feature maps are channels-last `(B, H, W, C)`. A partition first rolls the
//! map up-left by `shift` rows/columns (cyclically), then cuts it into
//! `window x window` tiles. Windows are ordered row-major over the tile grid
//! and tokens row-major inside each window.

use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct WindowedTokens {
    /// `(B * n_windows, window^2, C)`
    pub tokens: Tensor,
    pub window: usize,
    pub shift: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowedTokens {
    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }
}

pub fn window_partition(f: &Tensor, window: usize, shift: usize) -> Result<WindowedTokens> {
    let (b, h, w, c) = f.dims4()?;
    if window == 0 || shift >= window {
        return Err(Error::config(format!("invalid window {window} / shift {shift}")));
    }
    if h % window != 0 || w % window != 0 {
        return Err(Error::config(format!("{h}x{w} map does not tile into {window}x{window} windows")));
    }
    let rolled = roll(f, shift, false)?;
    let tokens = rolled
        .reshape((b, h / window, window, w / window, window, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b * (h / window) * (w / window), window * window, c))?;
    Ok(WindowedTokens { tokens, window, shift, batch: b, height: h, width: w })
}

pub fn window_reverse(t: &WindowedTokens) -> Result<Tensor> {
    let (n, len, c) = t.tokens.dims3()?;
    let ws = t.window;
    if len != ws * ws || n != t.batch * t.windows_per_image() {
        return Err(Error::shape(format!(
            "tokens {:?} do not match {} images of {}x{} in {ws}x{ws} windows",
            t.tokens.dims(),
            t.batch,
            t.height,
            t.width
        )));
    }
    let map = t
        .tokens
        .reshape((t.batch, t.height / ws, t.width / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((t.batch, t.height, t.width, c))?;
    roll(&map, t.shift, true)
}

/// Cyclic roll over the two spatial axes of a `(B, H, W, C)` map. Forward
/// moves content up-left by `s`, inverse undoes it.
fn roll(x: &Tensor, s: usize, inverse: bool) -> Result<Tensor> {
    if s == 0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for dim in [1, 2] {
        let n = out.dim(dim)?;
        let k = if inverse { n - s % n } else { s % n };
        if k == 0 {
            continue;
        }
        let head = out.narrow(dim, k, n - k)?;
        let tail = out.narrow(dim, 0, k)?;
        out = Tensor::cat(&[&head, &tail], dim)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn coord_map(h: usize, w: usize) -> Tensor {
        // channel 0 = row, channel 1 = column
        let v: Vec<f32> = (0..h).flat_map(|r| (0..w).flat_map(move |c| [r as f32, c as f32])).collect();
        Tensor::from_vec(v, (1, h, w, 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn single_window() {
        let t = window_partition(&coord_map(4, 4), 4, 0).unwrap();
        assert_eq!(t.tokens.dims(), &[1, 16, 2]);
    }

    #[test]
    fn index_map_matches_brute_force() {
        let t = window_partition(&coord_map(8, 8), 4, 0).unwrap();
        assert_eq!(t.tokens.dims(), &[4, 16, 2]);
        let tok = t.tokens.to_vec3::<f32>().unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let win = (r / 4) * 2 + c / 4;
                let slot = (r % 4) * 4 + c % 4;
                assert_eq!(tok[win][slot], vec![r as f32, c as f32]);
            }
        }
        let back = window_reverse(&t).unwrap();
        let diff = (back - coord_map(8, 8)).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn shifted_partition_is_cyclic() {
        let t = window_partition(&coord_map(8, 8), 4, 2).unwrap();
        let tok = t.tokens.to_vec3::<f32>().unwrap();
        // window 0, slot 0 holds original (2, 2); the last slot of window 3
        // wraps around to (1, 1).
        assert_eq!(tok[0][0], vec![2.0, 2.0]);
        assert_eq!(tok[3][15], vec![1.0, 1.0]);
        let back = window_reverse(&t).unwrap();
        let diff = (back - coord_map(8, 8)).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn zero_in_zero_out() {
        let z = Tensor::zeros((2, 8, 12, 3), DType::F32, &Device::Cpu).unwrap();
        let back = window_reverse(&window_partition(&z, 4, 1).unwrap()).unwrap();
        assert_eq!(back.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert_eq!(back.dims(), &[2, 8, 12, 3]);
    }

    #[test]
    fn rejects_non_divisible_dims() {
        let z = Tensor::zeros((1, 6, 8, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(window_partition(&z, 4, 0), Err(Error::Config(_))));
        assert!(matches!(window_partition(&z, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn reverse_rejects_mismatched_metadata() {
        let z = Tensor::zeros((1, 8, 8, 3), DType::F32, &Device::Cpu).unwrap();
        let mut t = window_partition(&z, 4, 0).unwrap();
        t.height = 12;
        assert!(matches!(window_reverse(&t), Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn round_trip_identity(hw in 1usize..4, ww in 1usize..4, ws in 1usize..5, s in 0usize..5, seed in 0u64..1000) {
            let shift = s % ws;
            let (h, w) = (hw * ws, ww * ws);
            let n = h * w * 3;
            let v: Vec<f32> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32).collect();
            let f = Tensor::from_vec(v.clone(), (1, h, w, 3), &Device::Cpu).unwrap();
            let back = window_reverse(&window_partition(&f, ws, shift).unwrap()).unwrap();
            proptest::prop_assert_eq!(back.flatten_all().unwrap().to_vec1::<f32>().unwrap(), v);
        }
    }
}
