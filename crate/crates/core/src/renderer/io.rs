use std::fs;
use std::path::Path;

use crate::diffcore::Grid2;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn filled(width: usize, height: usize, c: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![c; width * height],
        }
    }

    pub fn get(&self, p: usize) -> [f64; 3] {
        self.data[p]
    }

    pub fn set(&mut self, p: usize, c: [f64; 3]) {
        self.data[p] = c;
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B` as a sampling grid.
    pub fn luma<T: Real>(&self) -> Grid2<T> {
        let data = self
            .data
            .iter()
            .map(|c| T::c(0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]))
            .collect();
        Grid2::new(self.width, self.height, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in buf.pixels_mut().enumerate() {
            let c = self.data[i];
            *px = image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn read_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| p.0.map(|v| f64::from(v) / 255.0))
            .collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }

    /// Rounds every channel to the 8-bit grid, matching a PNG round trip.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|c| c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Row-major per-pixel ray distance; `+inf` marks background.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    /// Binary layout: `u32` width, `u32` height, then `width * height`
    /// little-endian `f32` values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(8 + 4 * self.data.len());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let bad = |detail: String| Error::Format {
            kind: "depth",
            path: path.to_path_buf(),
            detail,
        };
        if buf.len() < 8 {
            return Err(bad("truncated header".into()));
        }
        let w = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        if buf.len() != 8 + 4 * w * h {
            return Err(bad(format!("expected {} bytes for {w}x{h}, found {}", 8 + 4 * w * h, buf.len())));
        }
        let data = buf[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            data,
        })
    }
}
