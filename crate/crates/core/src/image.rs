//! Canonical image interchange format: H x W x 3, `f32` in `[0, 1]`, row-major HWC.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty image {height}x{width}")));
        }
        if pixels.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * Self::CHANNELS,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("image pixel".into()));
        }
        let pixels = pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Ok(Self { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0.0; height * width * Self::CHANNELS],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, pixels)
    }

    /// Grayscale from signed values in `[-1, 1]` (the diffusion/GAN output range).
    pub fn from_signed_gray(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "expected {} gray values, got {}",
                height * width,
                values.len()
            )));
        }
        let pixels = values
            .iter()
            .flat_map(|v| {
                let p = ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32;
                [p, p, p]
            })
            .collect();
        Self::new(height, width, pixels)
    }

    /// From a signed CHW tensor (1 or 3 channels) in `[-1, 1]`.
    pub fn from_signed_chw(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let v = data[src * h * w + y * w + x];
                    pixels.push(((v + 1.0) * 0.5).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(h, w, pixels)
    }

    /// Signed CHW `f32` tensor in `[-1, 1]`.
    pub fn to_signed_chw(&self, device: &Device) -> Result<Tensor> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[c * h * w + y * w + x] = self.pixels[(y * w + x) * 3 + c] * 2.0 - 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(out, (3, h, w), device)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::Shape("pixel buffer size".into()))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let buf = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .ok_or_else(|| Error::Shape("pixel buffer size".into()))?;
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        Self::new(height, width, out.into_raw())
    }

    /// Tiles equally sized images into a grid with `cols` columns.
    pub fn grid(images: &[Image], cols: usize) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image grid"))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|i| i.height != h || i.width != w) {
            return Err(Error::Shape("grid images differ in size".into()));
        }
        let cols = cols.max(1).min(images.len());
        let rows = images.len().div_ceil(cols);
        let mut out = Image::zeros(rows * h, cols * w);
        for (k, img) in images.iter().enumerate() {
            let (oy, ox) = ((k / cols) * h, (k % cols) * w);
            for y in 0..h {
                let dst = ((oy + y) * out.width + ox) * 3;
                let src = y * w * 3;
                out.pixels[dst..dst + w * 3].copy_from_slice(&img.pixels[src..src + w * 3]);
            }
        }
        Ok(out)
    }
}
