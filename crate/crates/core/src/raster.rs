//! Class-id masks and RGB images, plus their PNG encodings.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Pixel value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Set of foreground class ids (1..=n) present in an image.
pub type LabelSet = BTreeSet<u8>;

/// Per-pixel class ids in `{0..n} ∪ {IGNORE}`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

/// Seeds are class masks in which IGNORE marks undecided pixels.
pub type SeedMask = ClassMask;

impl ClassMask {
    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask buffer has {} values, expected {}x{}",
                values.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.values[y * self.width + x] = v;
    }

    /// Foreground ids (excluding background and IGNORE) that occur at least once.
    pub fn foreground_ids(&self) -> LabelSet {
        self.values.iter().copied().filter(|&v| v != 0 && v != IGNORE).collect()
    }

    /// Checks every value is a class id `<= n_classes` or IGNORE.
    pub fn check_ids(&self, n_classes: usize) -> Result<()> {
        match self.values.iter().find(|&&v| v != IGNORE && v as usize > n_classes) {
            Some(v) => Err(Error::Validation(format!(
                "mask value {v} outside 0..={n_classes} and not IGNORE"
            ))),
            None => Ok(()),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        image::GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("buffer length checked at construction")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let gray = img.into_luma8();
        let (w, h) = gray.dimensions();
        Self::from_vec(h as usize, w as usize, gray.into_raw())
    }
}

/// Three-channel image with values in `[0, 1]`, stored channel-major (CHW).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn from_chw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected 3x{}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(Self { height, width, data })
    }

    /// Builds from interleaved 8-bit RGB bytes.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let hw = height * width;
        if bytes.len() != 3 * hw {
            return Err(Error::Shape(format!(
                "rgb8 buffer has {} bytes, expected {}",
                bytes.len(),
                3 * hw
            )));
        }
        let mut data = vec![0.0; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                data[ch * hw + p] = bytes[3 * p + ch] as f64 / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = vec![0u8; 3 * hw];
        for p in 0..hw {
            for ch in 0..3 {
                out[3 * p + ch] = (self.data[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// RGB triple at a pixel.
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        [self.data[p], self.data[hw + p], self.data[2 * hw + p]]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length checked at construction")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let rgb = img.into_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}
