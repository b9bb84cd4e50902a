use image::imageops::{self, FilterType};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CLIP channel statistics.
pub const CLIP_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeFilter {
    Nearest,
    Bilinear,
    Bicubic,
    Lanczos3,
}

impl From<ResizeFilter> for FilterType {
    fn from(f: ResizeFilter) -> Self {
        match f {
            ResizeFilter::Nearest => FilterType::Nearest,
            ResizeFilter::Bilinear => FilterType::Triangle,
            ResizeFilter::Bicubic => FilterType::CatmullRom,
            ResizeFilter::Lanczos3 => FilterType::Lanczos3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagePreprocessSpec {
    pub target_side: u32,
    pub center_crop: bool,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
    pub filter: ResizeFilter,
}

impl Default for ImagePreprocessSpec {
    fn default() -> Self {
        Self {
            target_side: 224,
            center_crop: true,
            channel_means: CLIP_MEAN,
            channel_stds: CLIP_STD,
            filter: ResizeFilter::Bicubic,
        }
    }
}

/// A `3 x side x side` planar tensor, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelTensor {
    pub side: usize,
    pub data: Vec<f32>,
}

impl PixelTensor {
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.side * self.side;
        &self.data[c * plane..(c + 1) * plane]
    }
}

impl ImagePreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_side == 0 {
            return Err(Error::Config("target_side must be > 0".into()));
        }
        if self
            .channel_stds
            .iter()
            .any(|s| !s.is_finite() || *s <= 0.0)
        {
            return Err(Error::Config("channel_stds must be strictly positive".into()));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("channel_means must be finite".into()));
        }
        Ok(())
    }

    /// Shorter-side resize, optional center crop, per-channel standardization.
    pub fn apply(&self, image: &RgbImage) -> Result<PixelTensor> {
        self.validate()?;
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::DecodeFailure {
                path: String::new(),
                message: "empty raster".into(),
            });
        }
        let side = self.target_side;
        let filter: FilterType = self.filter.into();
        let square = if self.center_crop {
            let (rw, rh) = if w <= h {
                (side, scaled(h, side, w))
            } else {
                (scaled(w, side, h), side)
            };
            let resized = imageops::resize(image, rw, rh, filter);
            let x = (rw - side) / 2;
            let y = (rh - side) / 2;
            imageops::crop_imm(&resized, x, y, side, side).to_image()
        } else {
            imageops::resize(image, side, side, filter)
        };

        let side = side as usize;
        let plane = side * side;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in square.pixels().enumerate() {
            for c in 0..3 {
                let v = f32::from(px[c]) / 255.0;
                data[c * plane + i] = (v - self.channel_means[c]) / self.channel_stds[c];
            }
        }
        Ok(PixelTensor { side, data })
    }
}

// Rounded `long * side / short`, never below `side`.
fn scaled(long: u32, side: u32, short: u32) -> u32 {
    let v = (u64::from(long) * u64::from(side) + u64::from(short) / 2) / u64::from(short);
    (v as u32).max(side)
}
