//! Dense float images and their on-disk forms.
//!
//! Pixels are stored row-major with interleaved channels (`H × W × C`).
//! PNG output scales linear values by 255 with round-half-up and no
//! transfer curve; the raw dump keeps exact 32-bit floats in planar order
//! behind a 16-byte header (`magic, H, W, C`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const RAW_MAGIC: [u8; 4] = *b"AVRW";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Contract(format!(
                "image buffer has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Contract(format!(
                "shape mismatch: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )))
        }
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.width + col) * self.channels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// `[0, 1]` → `[-1, 1]`.
    pub fn to_signed(&self) -> Image {
        self.map(|v| 2.0 * v - 1.0)
    }

    /// `[-1, 1]` → `[0, 1]`.
    pub fn to_unit(&self) -> Image {
        self.map(|v| 0.5 * (v + 1.0))
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.height * self.width;
        if n == 0 {
            return 0.0;
        }
        self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal mirror.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for r in 0..self.height {
            for c in 0..self.width {
                let src = self.pixel(r, self.width - 1 - c);
                out.pixel_mut(r, c).copy_from_slice(src);
            }
        }
        out
    }

    /// 8-bit quantization used by the PNG writer.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_u8(v)).collect()
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            4 => png::ColorType::Rgba,
            c => return Err(Error::Format(format!("cannot write {c}-channel png"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        writer
            .finish()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Reads an 8-bit PNG into `[0, 1]`. Palette images are expanded; alpha is dropped.
    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Format(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (src_channels, keep) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (2, 1),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (4, 3),
            png::ColorType::Indexed => {
                return Err(Error::Format(format!("{}: unexpanded palette", path.display())))
            }
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let mut data = Vec::with_capacity(w * h * keep);
        for row in 0..h {
            let line = &buf[row * info.line_size..];
            for col in 0..w {
                for ch in 0..keep {
                    data.push(line[col * src_channels + ch] as f64 / 255.0);
                }
            }
        }
        Image::from_vec(h, w, keep, data)
    }

    /// Planar little-endian `f32` dump with a 16-byte header.
    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_raw_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(&RAW_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for c in 0..self.channels {
            for i in 0..self.height * self.width {
                out.extend_from_slice(&(self.data[i * self.channels + c] as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 16 || bytes[..4] != RAW_MAGIC {
            return Err(Error::Format("raw image: bad magic".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().unwrap()) as usize;
        let (h, w, c) = (word(1), word(2), word(3));
        let n = h * w * c;
        if bytes.len() != 16 + 4 * n {
            return Err(Error::Format(format!(
                "raw image: expected {} payload bytes, found {}",
                4 * n,
                bytes.len() - 16
            )));
        }
        let mut data = vec![0.0; n];
        for ch in 0..c {
            for i in 0..h * w {
                let off = 16 + 4 * (ch * h * w + i);
                data[i * c + ch] = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
            }
        }
        Image::from_vec(h, w, c, data)
    }

    pub fn read_raw(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Image::from_raw_bytes(&bytes)
    }
}

/// Scale by 255 and round half up, saturating at the ends of the range.
pub fn quantize_u8(v: f64) -> u8 {
    if !v.is_finite() {
        return 0;
    }
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.0), 0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(0.5 / 255.0), 1);
        assert_eq!(quantize_u8(0.49 / 255.0), 0);
        assert_eq!(quantize_u8(-3.0), 0);
        assert_eq!(quantize_u8(7.0), 255);
    }

    #[test]
    fn raw_header_is_sixteen_bytes_and_planar() {
        let img = Image::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = img.to_raw_bytes();
        assert_eq!(bytes.len(), 16 + 16);
        assert_eq!(&bytes[..4], b"AVRW");
        let first_plane: Vec<f32> = (0..2)
            .map(|i| f32::from_le_bytes(bytes[16 + 4 * i..20 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(first_plane, vec![1.0, 3.0]);
        assert_eq!(Image::from_raw_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_vec(2, 2, 3, (0..12).map(|k| k as f64 / 11.0).collect()).unwrap();
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
    }
}
