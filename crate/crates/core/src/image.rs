//! Dense floating-point raster used throughout the pipeline.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};

/// Row-major, channel-interleaved image (`data[(y * width + x) * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                what: "image data",
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Single-channel image holding the mean over channels, clamped to [0, 1].
    pub fn luminance(&self) -> Image {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n);
        for px in self.data.chunks_exact(self.channels) {
            let mean = px.iter().sum::<f64>() / self.channels as f64;
            out.push(mean.clamp(0.0, 1.0));
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Channel-planar copy (`C×H×W`), the layout used by tensors.
    pub fn to_planar(&self) -> Vec<f64> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * self.channels];
        for (p, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = v;
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[f64]) -> Result<Self> {
        let plane = width * height;
        if planar.len() != plane * channels {
            return Err(Error::SizeMismatch {
                what: "planar image data",
                expected: plane * channels,
                found: planar.len(),
            });
        }
        let mut data = vec![0.0; plane * channels];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = planar[c * plane + p];
            }
        }
        Image::new(width, height, channels, data)
    }

    /// 8-bit quantization used for PNG export: `round(clamp(v) * 255)`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| {
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                (v * 255.0).round() as u8
            })
            .collect()
    }

    /// Writes a 1- or 3-channel image as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => ExtendedColorType::L8,
            3 => ExtendedColorType::Rgb8,
            c => {
                return Err(Error::invalid(format!(
                    "PNG export supports 1 or 3 channels, got {c}"
                )))
            }
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder = PngEncoder::new(BufWriter::new(file));
        encoder
            .write_image(&self.to_u8(), self.width as u32, self.height as u32, color)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// Reads a PNG as a 3-channel RGB image with values in [0, 1].
    pub fn load_png_rgb(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::new(w as usize, h as usize, 3, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_roundtrip() {
        let img = Image::new(2, 2, 3, (0..12).map(|v| v as f64).collect()).unwrap();
        let planar = img.to_planar();
        assert_eq!(&planar[..4], &[0.0, 3.0, 6.0, 9.0]);
        assert_eq!(Image::from_planar(2, 2, 3, &planar).unwrap(), img);
    }

    #[test]
    fn luminance_is_channel_mean() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(img.luminance().data, vec![0.5]);
    }

    #[test]
    fn png_roundtrip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::new(2, 1, 3, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png_rgb(&path).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
