//! Planar RGB image tensors, bilinear resampling, and portable image IO.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{shape, Result};
use crate::fsutil::atomic_write;

/// `3 x H x W` image with values in `[0, 1]`, stored channel-planar.
///
/// Pixel `(u, v)` covers the continuous square `[u, u+1) x [v, v+1)`, so its
/// centre sits at `(u + 0.5, v + 0.5)` and the frame centre at `(W/2, H/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; Self::CHANNELS * width * height],
        }
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * width * height {
            return Err(shape(format!(
                "image buffer of {} values for {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at index-space coordinates, clamping to the border.
    pub fn sample(&self, c: usize, fx: f64, fy: f64) -> f64 {
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        let fx = fx.clamp(0.0, maxx);
        let fy = fy.clamp(0.0, maxy);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let top = self.get(c, x0, y0) * (1.0 - tx) + self.get(c, x1, y0) * tx;
        let bottom = self.get(c, x0, y1) * (1.0 - tx) + self.get(c, x1, y1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let q = |c| (self.get(c, x as usize, y as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            *px = Rgb([q(0), q(1), q(2)]);
        }
        img
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::zeros(w, h);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, x as usize, y as usize, px.0[c] as f64 / 255.0);
            }
        }
        out
    }

    /// Reads any supported format; `.img` files are binary PPM.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("img") => ImageFormat::Pnm,
            _ => image::guess_format(&bytes)?,
        };
        let img = image::load_from_memory_with_format(&bytes, format)?.to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    /// Writes PNG for `.png`, binary PPM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        encode_rgb8(&self.to_rgb8(), path)
    }
}

pub(crate) fn encode_rgb8(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "png") {
        img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)?;
    } else {
        let enc = PnmEncoder::new(&mut buf).with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary));
        img.write_with_encoder(enc)?;
    }
    atomic_write(path, &buf)
}
