//! Image front end: raw images become a grid of flattened patches, feature
//! files are read as-is.
//!
//! Feature file layout: two little-endian `u32` extents `R`, `D`, followed
//! by `R·D` little-endian `f64` values in row-major order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const FEATURE_EXTENSION: &str = "feat";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageConfig {
    /// Side length images are resized to.
    pub size: usize,
    /// Patch side length; must divide `size`.
    pub patch: usize,
    /// 1 (grayscale) or 3 (RGB).
    pub channels: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            size: 64,
            patch: 16,
            channels: 3,
        }
    }
}

impl ImageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.size == 0 || !self.size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} must divide image size {}",
                self.patch, self.size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.size / self.patch
    }

    pub fn regions(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn region_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Raw(PathBuf),
    Features(PathBuf),
}

impl ImageSource {
    pub fn from_path(path: &Path) -> Self {
        if path.extension().is_some_and(|e| e == FEATURE_EXTENSION) {
            ImageSource::Features(path.to_path_buf())
        } else {
            ImageSource::Raw(path.to_path_buf())
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            ImageSource::Raw(p) | ImageSource::Features(p) => p,
        }
    }
}

/// Interleaved pixel grid with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize(&self, w: usize, h: usize) -> PixelGrid {
        if w == self.width && h == self.height {
            return self.clone();
        }
        let mut data = Vec::with_capacity(w * h * self.channels);
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        for y in 0..h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for c in 0..self.channels {
                    let top = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
                    let bot = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
                    data.push(top * (1.0 - ty) + bot * ty);
                }
            }
        }
        PixelGrid {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    /// Flattens `patch × patch` tiles in row-major tile order; each row of
    /// the result is one tile, pixels row-major, channels interleaved.
    pub fn patches(&self, patch: usize) -> Result<Tensor> {
        if !self.width.is_multiple_of(patch) || !self.height.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch {patch} does not tile {}×{}",
                self.width, self.height
            )));
        }
        let (gx, gy) = (self.width / patch, self.height / patch);
        let dim = patch * patch * self.channels;
        let mut out = Vec::with_capacity(gx * gy * dim);
        for ty in 0..gy {
            for tx in 0..gx {
                for y in ty * patch..(ty + 1) * patch {
                    let start = (y * self.width + tx * patch) * self.channels;
                    out.extend_from_slice(&self.data[start..start + patch * self.channels]);
                }
            }
        }
        Tensor::new(&[gx * gy, dim], out)
    }
}

/// Decodes an image file into a grid with the requested channel count.
pub fn load_pixels(path: &Path, channels: usize) -> Result<PixelGrid> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        3 => img
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect(),
        c => return Err(Error::Config(format!("unsupported channel count {c}"))),
    };
    Ok(PixelGrid {
        width,
        height,
        channels,
        data,
    })
}

/// Region features `[R×D]` for an image source.
pub fn load_image_features(source: &ImageSource, cfg: &ImageConfig) -> Result<Tensor> {
    cfg.validate()?;
    match source {
        ImageSource::Raw(path) => {
            let grid = load_pixels(path, cfg.channels)?.resize(cfg.size, cfg.size);
            grid.patches(cfg.patch)
        }
        ImageSource::Features(path) => {
            let t = read_feature_file(path)?;
            let expected = [cfg.regions(), cfg.region_dim()];
            if t.shape() != expected {
                return Err(Error::shape(
                    "feature file",
                    format!(
                        "{} is {:?}, config expects {expected:?}",
                        path.display(),
                        t.shape()
                    ),
                ));
            }
            Ok(t)
        }
    }
}

pub fn encode_feature_file(t: &Tensor) -> Result<Vec<u8>> {
    let (r, d) = t.dims2()?;
    let mut out = Vec::with_capacity(8 + t.len() * 8);
    out.extend_from_slice(&(r as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 8 {
        return Err(bad("feature file shorter than its header".into()));
    }
    let r = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != r * d * 8 {
        return Err(bad(format!(
            "header says {r}×{d} but payload has {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&[r, d], data).map_err(|e| bad(e.to_string()))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes, path)
}

pub fn write_feature_file(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_feature_file(t)?).map_err(|e| Error::io(path, e))
}
