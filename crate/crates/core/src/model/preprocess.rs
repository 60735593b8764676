use std::path::Path;

use image::{imageops::FilterType, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

/// How raw RGB images become network inputs. Declared by the backend and
/// recorded in the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub height: usize,
    pub width: usize,
    /// Always `bilinear` for this backend.
    pub resize: String,
    pub channel_order: String,
    /// Multiplier applied to 8-bit pixel values before normalisation.
    pub scale: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessing {
    pub fn new(height: usize, width: usize, mean: [f64; 3], std: [f64; 3]) -> Self {
        Preprocessing {
            height,
            width,
            resize: "bilinear".to_string(),
            channel_order: "rgb".to_string(),
            scale: 1.0 / 255.0,
            mean,
            std,
        }
    }

    pub fn resize(&self, img: &RgbImage) -> RgbImage {
        if img.width() as usize == self.width && img.height() as usize == self.height {
            img.clone()
        } else {
            image::imageops::resize(img, self.width as u32, self.height as u32, FilterType::Triangle)
        }
    }

    /// Resizes to the input resolution and normalises into a `(3, H, W)` tensor.
    pub fn to_tensor(&self, img: &RgbImage) -> Array3<f64> {
        let resized = self.resize(img);
        Array3::from_shape_fn((3, self.height, self.width), |(c, y, x)| {
            let v = resized.get_pixel(x as u32, y as u32)[c] as f64 * self.scale;
            (v - self.mean[c]) / self.std[c]
        })
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| AuditError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}
