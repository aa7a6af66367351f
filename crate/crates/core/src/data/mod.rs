//! Synthetic word images, preprocessing and robustness transforms.

pub mod dataset;
pub mod font;
pub mod pgm;
pub mod preprocess;
pub mod render;
pub mod transform;

use crate::error::{Error, Result};

/// Planar `C×H×W` image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Image(format!("degenerate image {channels}×{height}×{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Image(format!("{} values for a {channels}×{height}×{width} image", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self { channels, height, width, data: vec![value; channels * height * width] }
    }

    /// Replicates a single gray plane into three channels.
    pub fn from_gray(height: usize, width: usize, gray: &[f32]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * gray.len());
        for _ in 0..3 {
            data.extend_from_slice(gray);
        }
        Self::new(3, height, width, data)
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-pixel mean over channels.
    pub fn to_gray(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n).map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f32>() / self.channels as f32).collect()
    }
}
