//! RGB images as `H x W x 3` float arrays in `[0, 1]`, with PNG / PPM I/O
//! and the reflect padding used before analysis.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    /// Row-major, channels interleaved.
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("image must be at least 1x1, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(format!("{} values for a {height}x{width}x3 image", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pixel value at index {i}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn clamped(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect() }
    }

    /// `(1, 3, H, W)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.height, self.width, 3), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Accepts `(1, 3, H, W)` or `(3, H, W)` of any float dtype.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::shape(format!("expected (1, 3, H, W), got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t.permute((1, 2, 0))?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(h, w, data)
    }

    /// Stacks same-sized images into `(B, 3, H, W)`.
    pub fn batch(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
        if images.iter().any(|im| im.height != first.height || im.width != first.width) {
            return Err(Error::shape("images in a batch must share one size"));
        }
        let ts = images.iter().map(|im| im.to_tensor(device)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&ts, 0)?)
    }

    /// Mirror-pads bottom and right so both sides become multiples of
    /// `multiple`. Returns the image unchanged when no padding is needed.
    pub fn pad_reflect(&self, multiple: usize) -> Self {
        let h = self.height.div_ceil(multiple) * multiple;
        let w = self.width.div_ceil(multiple) * multiple;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in 0..h {
            let sr = reflect_index(r, self.height);
            for c in 0..w {
                data.extend_from_slice(&self.pixel(sr, reflect_index(c, self.width)));
            }
        }
        Self { height: h, width: w, data }
    }

    /// Top-left `height x width` region.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        self.crop_at(0, 0, height, width)
    }

    pub fn crop_at(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let i = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[i..i + width * 3]);
        }
        Self::new(height, width, data)
    }

    /// 8-bit RGB, rounding to the nearest level after clamping.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Reads PNG or PPM (any format the decoder recognizes by content).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::ImageReader::open(path.as_ref())?.with_guessed_format()?.decode()?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(h as usize, w as usize, img.as_raw())
    }

    /// Writes 8-bit RGB; the format follows the extension (`.ppm` or PNG).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::shape("image buffer size mismatch"))?;
        let format = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ppm") | Some("pnm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        buf.save_with_format(path, format)?;
        Ok(())
    }
}

/// Index into `0..n` for position `i` of a mirror-extended axis
/// (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`), periodic for any `i`.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w * 3).map(|i| (i % 97) as f32 / 97.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(ImageTensor::new(0, 4, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, vec![0.0; 11]).is_err());
        let mut v = vec![0.0; 12];
        v[5] = f32::NAN;
        assert!(matches!(ImageTensor::new(2, 2, v), Err(Error::Numeric(_))));
    }

    #[test]
    fn tensor_round_trip() {
        let im = ramp(5, 7);
        let t = im.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[1, 3, 5, 7]);
        // channel-first layout: t[0, c, r, col] == pixel(r, col)[c]
        let chw = t.squeeze(0).unwrap().to_vec3::<f32>().unwrap();
        assert_eq!(chw[2][4][6], im.pixel(4, 6)[2]);
        assert_eq!(ImageTensor::from_tensor(&t).unwrap(), im);
    }

    #[test]
    fn reflect_pad_and_crop() {
        let im = ramp(3, 5);
        let p = im.pad_reflect(4);
        assert_eq!((p.height(), p.width()), (4, 8));
        // row 3 mirrors row 1, column 5 mirrors column 3
        assert_eq!(p.pixel(3, 0), im.pixel(1, 0));
        assert_eq!(p.pixel(0, 5), im.pixel(0, 3));
        assert_eq!(p.pixel(0, 7), im.pixel(0, 1));
        assert_eq!(p.crop(3, 5).unwrap(), im);
        assert_eq!(im.pad_reflect(1), im);
        // a single pixel pads by replication
        let one = ramp(1, 1).pad_reflect(4);
        assert!(one.data().chunks(3).all(|px| px == ramp(1, 1).data()));
    }

    #[test]
    fn reflect_index_is_periodic_mirror() {
        let got: Vec<usize> = (0..10).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(got, vec![0, 1, 2, 1, 0, 1, 2, 1, 0, 1]);
    }

    #[test]
    fn png_and_ppm_round_trip_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let im = ImageTensor::from_rgb8(4, 6, &(0..72).map(|i| (i * 3) as u8).collect::<Vec<_>>()).unwrap();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            im.save(&path).unwrap();
            assert_eq!(ImageTensor::load(&path).unwrap(), im);
        }
    }
}
