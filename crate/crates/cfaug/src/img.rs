//! Pixel containers: images in `[0,1]`, binary causal regions, and rectangles.
//!
//! All augmentation code works in `[0,1]` space; mapping to the model's
//! `[-1,1]` range happens only at the network boundary (`normalize` /
//! `denormalize`). Data is row-major, channel-interleaved.

use std::path::Path;

use crate::error::{CfaugError, Result};

/// An `H x W x C` image with intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved: index = (y * width + x) * channels + c.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CfaugError::InvalidImage(format!(
                "unsupported channel count {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(CfaugError::InvalidImage(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(CfaugError::InvalidImage(
                "pixel values must be finite and in [0,1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Constant-valued image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Map `[0,1]` to the model's `[-1,1]` range.
    pub fn normalize(&self) -> Vec<f64> {
        self.data.iter().map(|v| 2.0 * v - 1.0).collect()
    }

    /// Inverse of `normalize`, clamped back into `[0,1]`.
    pub fn from_normalized(
        height: usize,
        width: usize,
        channels: usize,
        normed: &[f64],
    ) -> Result<Self> {
        let data = normed.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        Self::new(height, width, channels, data)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let dyn_img = image::open(path)
            .map_err(|e| CfaugError::Io(format!("{}: {e}", path.display())))?;
        match dyn_img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.into_raw().iter().map(|v| *v as f64 / 255.0).collect();
                Image::new(h, w, 1, data)
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let data = rgb.into_raw().iter().map(|v| *v as f64 / 255.0).collect();
                Image::new(h, w, 3, data)
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("sized buffer")
                .save(path),
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("sized buffer")
                .save(path),
            _ => unreachable!("channels checked at construction"),
        };
        res.map_err(|e| CfaugError::Io(format!("{}: {e}", path.display())))
    }
}

/// Binary causal mask paired with an image; 1 marks foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub height: usize,
    pub width: usize,
    /// Row-major bits, length height * width.
    pub mask: Vec<u8>,
}

impl Region {
    pub fn new(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(CfaugError::InvalidRegion(format!(
                "mask length {} != {}x{}",
                mask.len(),
                height,
                width
            )));
        }
        if mask.iter().any(|b| *b > 1) {
            return Err(CfaugError::InvalidRegion("mask bits must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            mask,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            mask: vec![0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.mask[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, bit: u8) {
        self.mask[y * self.width + x] = bit;
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|b| **b == 1).count()
    }

    pub fn background_count(&self) -> usize {
        self.mask.len() - self.foreground_count()
    }

    /// Bitwise complement.
    pub fn complement(&self) -> Region {
        Region {
            height: self.height,
            width: self.width,
            mask: self.mask.iter().map(|b| 1 - b).collect(),
        }
    }

    /// Tightest axis-aligned rectangle containing every 1-bit, or `None`
    /// for an all-zero mask.
    pub fn bounding_box(&self) -> Option<Rect> {
        let mut top = usize::MAX;
        let mut bottom = 0usize;
        let mut left = usize::MAX;
        let mut right = 0usize;
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) == 1 {
                    any = true;
                    top = top.min(y);
                    bottom = bottom.max(y);
                    left = left.min(x);
                    right = right.max(x);
                }
            }
        }
        if !any {
            return None;
        }
        Some(Rect {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        })
    }

    /// Mask filled over the bounding box of the 1-bits. All-zero masks stay
    /// all-zero.
    pub fn boxed(&self) -> Region {
        match self.bounding_box() {
            None => self.clone(),
            Some(r) => {
                let mut out = Region::empty(self.height, self.width);
                for y in r.top..r.top + r.height {
                    for x in r.left..r.left + r.width {
                        out.set(y, x, 1);
                    }
                }
                out
            }
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| CfaugError::Io(format!("{}: {e}", path.display())))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mask = img.into_raw().iter().map(|v| u8::from(*v != 0)).collect();
        Region::new(h, w, mask)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.mask.iter().map(|b| b * 255).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("sized buffer")
            .save(path)
            .map_err(|e| CfaugError::Io(format!("{}: {e}", path.display())))
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}
