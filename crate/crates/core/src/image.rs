//! Row-major float images and 8-bit PNG I/O.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Interleaved `height x width x channels` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(invalid(format!(
                "image buffer has {} values, want {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, v: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![v; width * height * channels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    /// Grey map of a scalar field, linearly stretched to `[0, 1]`.
    pub fn normalized_gray(width: usize, height: usize, values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let data = values.iter().map(|v| (v - lo) / span).collect();
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(self.channels)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Writes an 8-bit PNG (grey or RGB).
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => png::ColorType::Grayscale,
            3 => png::ColorType::Rgb,
            c => return Err(invalid(format!("cannot write {c}-channel png"))),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    /// Reads an 8-bit grey, grey+alpha, RGB or RGBA PNG. Alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(fmt)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (keep, stride) = match info.color_type {
            png::ColorType::Grayscale => (1, 1),
            png::ColorType::GrayscaleAlpha => (1, 2),
            png::ColorType::Rgb => (3, 3),
            png::ColorType::Rgba => (3, 4),
            png::ColorType::Indexed => return Err(Error::Format(format!("{}: indexed png", path.display()))),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let data = buf[..info.buffer_size()]
            .chunks(stride)
            .flat_map(|p| p[..keep].iter().map(|&b| b as f64 / 255.0))
            .collect();
        Image::new(w, h, keep, data)
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
