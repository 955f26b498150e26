//! Grayscale images as real intensities in [0,1], plus PNG I/O.
//!
//! 8-bit and 16-bit grayscale PNGs map linearly onto [0,1]. Anything else
//! (color, alpha) is rejected rather than silently converted.

use std::path::Path;

use crate::error::{Error, Result};

pub const MIN_DIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height < MIN_DIM || width < MIN_DIM {
            return Err(Error::Param {
                op: "GrayImage::new",
                message: format!("dimensions {height}x{width} below minimum {MIN_DIM}"),
            });
        }
        if pixels.len() != height * width {
            return Err(Error::Param {
                op: "GrayImage::new",
                message: format!("{height}x{width} image needs {} pixels, got {}", height * width, pixels.len()),
            });
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Param {
                op: "GrayImage::new",
                message: "pixel intensities must lie in [0,1]".into(),
            });
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    /// Build from a per-pixel function of (row, col); values are clamped.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self::new(height, width, pixels)
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

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.pixels[r * self.width + c]
    }

    pub fn mean(&self) -> f32 {
        let sum: f64 = self.pixels.iter().map(|&p| p as f64).sum();
        (sum / self.pixels.len() as f64) as f32
    }

    /// Map every pixel, clamping back into [0,1].
    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| f(p).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect();
        let img = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, buf)
            .expect("buffer length matches dimensions");
        img.save(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dynamic = image::open(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        let (w, h, pixels) = match dynamic {
            image::DynamicImage::ImageLuma8(buf) => {
                let (w, h) = buf.dimensions();
                let px = buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
                (w, h, px)
            }
            image::DynamicImage::ImageLuma16(buf) => {
                let (w, h) = buf.dimensions();
                let px = buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect();
                (w, h, px)
            }
            other => {
                return Err(Error::Data(format!(
                    "{}: expected 8- or 16-bit grayscale PNG, got {:?} pixels",
                    path.display(),
                    other.color()
                )))
            }
        };
        Self::new(h as usize, w as usize, pixels)
    }
}
