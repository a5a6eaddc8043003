//! Quality and rate metrics, and RD-curve export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Codec;
use crate::codec::DecodeMode;
use crate::entropy::Bitstream;
use crate::error::{Error, Result};
use crate::imageio::ImageTensor;
use crate::noise::Pair;
use crate::pipeline::{decode_image, encode_image};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// PSNR in dB over all RGB values, peak 1.
pub fn psnr(reference: &ImageTensor, test: &ImageTensor) -> Result<f64> {
    let mse = mse(reference, test)?;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Bits per pixel of the whole container, header included.
pub fn bpp(bs: &Bitstream) -> f64 {
    8.0 * bs.total_bytes() as f64 / (bs.header.height as f64 * bs.header.width as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub image: String,
    /// `standard` or `denoise`.
    pub mode: String,
    /// Rate-point index into the lambda table.
    pub lambda: usize,
    pub bpp: f64,
    pub psnr: f64,
}

/// Writes `path` as CSV (`image,mode,lambda,bpp,psnr`, rows sorted by bpp)
/// and an SVG plot of PSNR against bpp per mode next to it. Returns the
/// plot path.
pub fn export_rd(points: &[RdPoint], path: impl AsRef<Path>) -> Result<PathBuf> {
    if points.is_empty() {
        return Err(Error::config("no RD points to export"));
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for p in &sorted {
        w.serialize(p)?;
    }
    w.flush()?;
    let plot = path.with_extension("svg");
    std::fs::write(&plot, render_svg(&sorted))?;
    Ok(plot)
}

/// Encodes each noisy image once and decodes it in every mode the codec
/// supports, scoring against the clean image. Ids are `pair_NNNN`.
pub fn evaluate_pairs(codec: &Codec, pairs: &[Pair]) -> Result<Vec<RdPoint>> {
    let modes: &[DecodeMode] =
        if codec.cfg.has_addons() { &[DecodeMode::Standard, DecodeMode::Denoise] } else { &[DecodeMode::Standard] };
    let mut out = Vec::with_capacity(pairs.len() * modes.len());
    for (i, pair) in pairs.iter().enumerate() {
        let enc = encode_image(codec, &pair.noisy)?;
        for &mode in modes {
            let dec = decode_image(codec, &enc.bitstream, mode)?;
            out.push(RdPoint {
                image: format!("pair_{i:04}"),
                mode: mode.to_string(),
                lambda: codec.cfg.lambda_index,
                bpp: enc.bpp,
                psnr: psnr(&pair.clean, &dec.image)?,
            });
        }
    }
    Ok(out)
}

/// Mean PSNR of the points in `mode`, or `None` if there are none.
pub fn mean_psnr(points: &[RdPoint], mode: &str) -> Option<f64> {
    let v: Vec<f64> = points.iter().filter(|p| p.mode == mode).map(|p| p.psnr).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn read_rd(path: impl AsRef<Path>) -> Result<Vec<RdPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn render_svg(points: &[RdPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 48.0;
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x0 = x0.min(p.bpp);
        x1 = x1.max(p.bpp);
        y0 = y0.min(p.psnr);
        y1 = y1.max(p.psnr);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bpp ({x0:.3} to {x1:.3})</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">PSNR dB ({y0:.2} to {y1:.2})</text>"#,
        H / 2.0,
        H / 2.0
    );
    let mut modes: Vec<&str> = points.iter().map(|p| p.mode.as_str()).collect();
    modes.sort();
    modes.dedup();
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (i, mode) in modes.iter().enumerate() {
        let color = colors[i % colors.len()];
        let pts: Vec<String> = points
            .iter()
            .filter(|p| p.mode == *mode)
            .map(|p| format!("{:.2},{:.2}", sx(p.bpp), sy(p.psnr)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}">{mode}</text>"#, W - PAD - 60.0, PAD + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}
