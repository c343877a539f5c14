//! Real-valued RGB view images and their on-disk forms.
//!
//! Pixels live in `[0, 1]` as `f64`. Images are written as 8-bit PNG for
//! people and tools, and as a raw little-endian `f64` sidecar when a later
//! pipeline phase needs the exact values back.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

const RAW_MAGIC: &[u8; 8] = b"C3IMGF64";

#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    pub view_id: u32,
    /// `(height, width, 3)`.
    pixels: Array3<f64>,
}

impl ViewImage {
    pub fn new(view_id: u32, pixels: Array3<f64>) -> Result<Self> {
        let shape = pixels.shape();
        if shape[2] != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", shape[2])));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!(
                "pixel value {bad} outside [0,1] in view {view_id}"
            )));
        }
        Ok(Self {
            view_id,
            pixels: pixels.as_standard_layout().into_owned(),
        })
    }

    /// Clamps into `[0, 1]`; NaN is rejected.
    pub fn from_clamped(view_id: u32, mut pixels: Array3<f64>) -> Result<Self> {
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::Invalid(format!("NaN pixel in view {view_id}")));
        }
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(view_id, pixels)
    }

    pub fn filled(view_id: u32, width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let pixels = Array3::from_shape_fn((height, width, 3), |(_, _, c)| rgb[c]);
        Self::new(view_id, pixels)
    }

    /// Builds from a `(3, H, W)` channel-major tensor.
    pub fn from_chw(view_id: u32, chw: &Array3<f64>) -> Result<Self> {
        let hwc = chw.view().permuted_axes([1, 2, 0]).to_owned();
        Self::from_clamped(view_id, hwc)
    }

    pub fn to_chw(&self) -> Array3<f64> {
        self.pixels
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        [self.pixels[[y, x, 0]], self.pixels[[y, x, 1]], self.pixels[[y, x, 2]]]
    }

    pub fn as_slice(&self) -> &[f64] {
        self.pixels.as_slice().expect("standard layout")
    }

    pub fn with_view_id(mut self, view_id: u32) -> Self {
        self.view_id = view_id;
        self
    }

    pub fn ensure_same_dims(&self, other: &ViewImage) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "image {}x{} vs {}x{}",
                self.width(),
                self.height(),
                other.width(),
                other.height()
            )));
        }
        Ok(())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (w, h) = self.dims();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let p = self.pixel(x as usize, y as usize);
            image::Rgb(p.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        })
    }

    pub fn from_rgb8(view_id: u32, img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Self::new(view_id, pixels)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path)?;
        Ok(())
    }

    pub fn load_png(view_id: u32, path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        Self::from_rgb8(view_id, &img)
    }

    pub fn decode_png(view_id: u32, bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        Self::from_rgb8(view_id, &img)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Lossless raw form: magic, view id, width, height, then `f64` LE samples.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.pixels.len() * 8);
        buf.extend_from_slice(RAW_MAGIC);
        buf.extend_from_slice(&self.view_id.to_le_bytes());
        buf.extend_from_slice(&(self.width() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height() as u32).to_le_bytes());
        for v in self.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::parse("raw image", m);
        if bytes.len() < 20 || &bytes[..8] != RAW_MAGIC {
            return Err(bad("missing header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (view_id, w, h) = (word(8), word(12) as usize, word(16) as usize);
        let body = &bytes[20..];
        if body.len() != w * h * 3 * 8 {
            return Err(bad("truncated pixel data"));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let pixels = Array3::from_shape_vec((h, w, 3), data).map_err(|e| bad(&e.to_string()))?;
        Self::new(view_id, pixels)
    }

    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_raw_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw_bytes(&bytes)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }
}

/// Binary per-pixel mask, `true` where the loss applies.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Array2<bool>,
}

impl Mask {
    pub fn new(bits: Array2<bool>) -> Self {
        Self { bits }
    }

    pub fn full(width: usize, height: usize, value: bool) -> Self {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn width(&self) -> usize {
        self.bits.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.bits.shape()[0]
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[[y, x]]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Any non-zero luma marks the pixel as inside the mask.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_luma8();
        let (w, h) = img.dimensions();
        let bits = Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
            img.get_pixel(x as u32, y as u32)[0] > 0
        });
        Ok(Self::new(bits))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_fn(self.width() as u32, self.height() as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        });
        img.save(path.as_ref())?;
        Ok(())
    }
}

/// Mean over spatial positions of each channel, `(H, W, 3) -> [3]`.
pub fn channel_means(img: &ViewImage) -> [f64; 3] {
    let m = img.pixels().mean_axis(Axis(0)).unwrap();
    let m = m.mean_axis(Axis(0)).unwrap();
    [m[0], m[1], m[2]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        let px = Array3::from_elem((8, 8, 3), 1.2);
        assert!(ViewImage::new(0, px).is_err());
    }

    #[test]
    fn raw_round_trip_is_exact() {
        let px = Array3::from_shape_fn((9, 8, 3), |(y, x, c)| ((y * 31 + x * 7 + c) as f64 / 97.0).fract());
        let img = ViewImage::new(5, px).unwrap();
        let back = ViewImage::from_raw_bytes(&img.to_raw_bytes()).unwrap();
        assert_eq!(img, back);
        let mut truncated = img.to_raw_bytes();
        truncated.truncate(100);
        assert!(ViewImage::from_raw_bytes(&truncated).is_err());
    }

    #[test]
    fn png_quantizes_to_8_bit() {
        let img = ViewImage::filled(1, 8, 8, [0.2, 0.5, 1.0]).unwrap();
        let back = ViewImage::decode_png(1, &img.encode_png().unwrap()).unwrap();
        assert!((back.pixel(3, 3)[0] - 51.0 / 255.0).abs() < 1e-12);
        assert_eq!(back.pixel(0, 0)[2], 1.0);
    }

    #[test]
    fn chw_round_trip() {
        let px = Array3::from_shape_fn((8, 10, 3), |(y, x, c)| (y + x + c) as f64 / 30.0);
        let img = ViewImage::new(0, px).unwrap();
        let chw = img.to_chw();
        assert_eq!(chw.shape(), &[3, 8, 10]);
        assert_eq!(ViewImage::from_chw(0, &chw).unwrap(), img);
    }
}
