//! Grad-CAM heatmaps and overlay rendering.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};

use crate::error::{AuditError, Result};
use crate::model::Classifier;

/// A Grad-CAM map at the resolution of the source layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub target_class: usize,
    pub layer_id: String,
    /// Values in `[0, 1]`.
    pub heatmap: Array2<f64>,
}

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const COLORMAP_NAME: &str = "viridis";

/// `relu(sum_c w_c * A_c)` with `w_c` the spatial mean of the class-score
/// gradient, divided by its maximum. A map with no positive value is all zero.
pub fn grad_cam_from(activation: &Array3<f64>, gradient: &Array3<f64>) -> Array2<f64> {
    assert_eq!(activation.dim(), gradient.dim(), "activation/gradient shape mismatch");
    let weights = gradient
        .mean_axis(Axis(2))
        .and_then(|m| m.mean_axis(Axis(1)))
        .expect("non-empty spatial dims");
    let (_, h, w) = activation.dim();
    let mut cam = Array2::<f64>::zeros((h, w));
    for (c, wc) in weights.iter().enumerate() {
        cam.scaled_add(*wc, &activation.index_axis(Axis(0), c));
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let max = cam.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        cam.mapv_inplace(|v| (v / max).clamp(0.0, 1.0));
    }
    cam
}

pub fn grad_cam(
    model: &dyn Classifier,
    input: &Array3<f64>,
    target_class: usize,
    layer_id: &str,
) -> Result<SaliencyMap> {
    let (act, grad) = model
        .activation_and_gradient(input, target_class, layer_id)
        .map_err(|e| match e {
            AuditError::Capability(msg) => {
                AuditError::Capability(format!("saliency unavailable: {msg}"))
            }
            other => other,
        })?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::Validation("non-finite class gradient".into()));
    }
    Ok(SaliencyMap {
        target_class,
        layer_id: layer_id.to_string(),
        heatmap: grad_cam_from(&act, &grad),
    })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Array2::from_shape_fn((height, width), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = map[[y0, x0]] * (1.0 - tx) + map[[y0, x1]] * tx;
        let bottom = map[[y1, x0]] * (1.0 - tx) + map[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

// Viridis sampled at nine evenly spaced stops.
const VIRIDIS: [[f64; 3]; 9] = [
    [68.0, 1.0, 84.0],
    [71.0, 44.0, 122.0],
    [59.0, 81.0, 139.0],
    [44.0, 113.0, 142.0],
    [33.0, 144.0, 141.0],
    [39.0, 173.0, 129.0],
    [92.0, 200.0, 99.0],
    [170.0, 220.0, 50.0],
    [253.0, 231.0, 37.0],
];

pub fn viridis(v: f64) -> [u8; 3] {
    let t = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (t.floor() as usize).min(VIRIDIS.len() - 2);
    let f = t - i as f64;
    let mut out = [0u8; 3];
    for c in 0..3 {
        out[c] = (VIRIDIS[i][c] * (1.0 - f) + VIRIDIS[i + 1][c] * f).round() as u8;
    }
    out
}

/// Blends the colour-mapped heatmap over `base`, upsampling as needed.
pub fn render_overlay(base: &RgbImage, heatmap: &Array2<f64>, alpha: f64) -> RgbImage {
    let (w, h) = base.dimensions();
    let up = upsample_bilinear(heatmap, h as usize, w as usize);
    RgbImage::from_fn(w, h, |x, y| {
        let px = base.get_pixel(x, y);
        let col = viridis(up[[y as usize, x as usize]]);
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = ((1.0 - alpha) * px[c] as f64 + alpha * col[c] as f64).round() as u8;
        }
        Rgb(out)
    })
}

/// Little-endian `f32` values, base64 encoded.
pub fn encode_heatmap(map: &Array2<f64>) -> String {
    let bytes: Vec<u8> = map
        .iter()
        .flat_map(|v| (*v as f32).to_le_bytes())
        .collect();
    B64.encode(bytes)
}

pub fn decode_heatmap(data: &str, height: usize, width: usize) -> Result<Array2<f64>> {
    let bytes = B64
        .decode(data)
        .map_err(|e| AuditError::Validation(format!("bad heatmap encoding: {e}")))?;
    if bytes.len() != height * width * 4 {
        return Err(AuditError::Validation(format!(
            "heatmap has {} bytes, expected {}",
            bytes.len(),
            height * width * 4
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((height, width), values).expect("length checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_computed_single_channel() {
        let act = array![[[0.0, 2.0], [4.0, 0.0]]];
        let grad = Array3::from_elem((1, 2, 2), 1.0);
        assert_eq!(grad_cam_from(&act, &grad), array![[0.0, 0.5], [1.0, 0.0]]);
    }

    #[test]
    fn negative_gradient_gives_zero_map() {
        let act = array![[[0.0, 2.0], [4.0, 0.0]]];
        let grad = Array3::from_elem((1, 2, 2), -1.0);
        assert_eq!(grad_cam_from(&act, &grad), Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn joint_positive_scaling_leaves_map_unchanged() {
        let act = array![[[0.3, 2.0], [1.0, 0.1]], [[1.5, 0.2], [0.0, 0.7]]];
        let grad = array![[[0.5, -0.2], [0.1, 0.3]], [[-0.4, 0.6], [0.2, 0.2]]];
        let base = grad_cam_from(&act, &grad);
        let scaled = grad_cam_from(&act.mapv(|v| v * 3.7), &grad.mapv(|v| v * 3.7));
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_range() {
        let m = Array2::from_elem((3, 3), 0.25);
        assert!(upsample_bilinear(&m, 7, 5).iter().all(|v| (v - 0.25).abs() < 1e-12));
        let m = array![[0.0, 1.0], [1.0, 0.0]];
        let up = upsample_bilinear(&m, 8, 8);
        assert!(up.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(up[[0, 0]], 0.0);
        assert_eq!(up[[0, 7]], 1.0);
    }

    #[test]
    fn heatmap_encoding_round_trips_at_f32_precision() {
        let m = array![[0.0, 0.5], [1.0, 0.125]];
        let enc = encode_heatmap(&m);
        assert_eq!(decode_heatmap(&enc, 2, 2).unwrap(), m);
        assert!(decode_heatmap(&enc, 3, 2).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(viridis(0.0), [68, 1, 84]);
        assert_eq!(viridis(1.0), [253, 231, 37]);
        assert_eq!(viridis(7.0), viridis(1.0));
    }
}
