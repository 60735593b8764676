//! Two-class shapes dataset with a spurious background colour.
//!
//! Class 0 images show a horizontal bar, class 1 a vertical one. The
//! `warm` attribute tints the background red-orange instead of blue. In the
//! training split the tint follows the label; in the audit split it does not.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{inject_bias, write_csv_manifest, BiasSpec, ImageRecord, Split};
use crate::error::{AuditError, Result};

pub const ATTRIBUTE: &str = "warm";
pub const CLASS_NAMES: [&str; 2] = ["horizontal", "vertical"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub image_size: u32,
    /// Training images per class after bias injection.
    pub train_per_class: usize,
    pub audit_per_class: usize,
    /// Fraction of class-1 training images with the attribute.
    pub train_cooccurrence: f64,
    pub audit_cooccurrence: f64,
    /// Fraction of training images whose drawn bar contradicts the label.
    /// The background still follows the label, so colour stays the stronger cue.
    pub train_label_noise: f64,
    /// Per-pixel Gaussian noise, in 0..255 units.
    pub noise: f64,
    /// Shape brightness above the background.
    pub contrast: f64,
    /// Bar length range in pixels.
    pub min_length: f64,
    pub max_length: f64,
    pub thickness: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            image_size: 32,
            train_per_class: 600,
            audit_per_class: 400,
            train_cooccurrence: 0.9,
            audit_cooccurrence: 0.5,
            train_label_noise: 0.2,
            noise: 28.0,
            contrast: 60.0,
            min_length: 10.0,
            max_length: 16.0,
            thickness: 3.0,
            seed: 11,
        }
    }
}

const WARM: [f64; 3] = [176.0, 108.0, 72.0];
const COOL: [f64; 3] = [72.0, 108.0, 176.0];

/// Draws one image. Deterministic in `seed`.
pub fn draw_shape(label: usize, warm: bool, config: &ShapesConfig, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = config.image_size;
    let base = if warm { WARM } else { COOL };
    let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-12.0..12.0));
    let long = rng.random_range(config.min_length..=config.max_length) / 2.0;
    let short = config.thickness / 2.0;
    let (hy, hx) = if label == 0 { (short, long) } else { (long, short) };
    let cy = rng.random_range(hy + 1.0..size as f64 - hy - 1.0);
    let cx = rng.random_range(hx + 1.0..size as f64 - hx - 1.0);
    let noise = Normal::new(0.0, config.noise.max(1e-9)).expect("valid sd");
    RgbImage::from_fn(size, size, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let inside = (px - cx).abs() <= hx && (py - cy).abs() <= hy;
        let mut out = [0u8; 3];
        for c in 0..3 {
            let mut v = base[c] + jitter[c] + noise.sample(&mut rng);
            if inside {
                v += config.contrast;
            }
            out[c] = v.round().clamp(0.0, 255.0) as u8;
        }
        Rgb(out)
    })
}

fn split_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 1u64,
        Split::Audit => 2u64,
    };
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (tag << 56) ^ index as u64
}

struct Drawn {
    record: ImageRecord,
    pixels: RgbImage,
}

fn draw_group(
    out: &mut Vec<Drawn>,
    split: Split,
    label: usize,
    warm: bool,
    count: usize,
    config: &ShapesConfig,
) {
    for _ in 0..count {
        let index = out.len();
        let id = format!("{split}_{index:05}");
        let seed = split_seed(config.seed, split, index);
        let flip = split == Split::Train
            && ChaCha8Rng::seed_from_u64(!seed).random::<f64>() < config.train_label_noise;
        let shape = if flip { 1 - label } else { label };
        out.push(Drawn {
            record: ImageRecord {
                image_id: id.clone(),
                path: format!("images/{id}.png").into(),
                true_label: label,
                attributes: BTreeMap::from([(ATTRIBUTE.to_string(), warm)]),
                split,
            },
            pixels: draw_shape(shape, warm, config, seed),
        });
    }
}

fn round_count(total: usize, rate: f64) -> usize {
    (total as f64 * rate).round() as usize
}

/// Generates the dataset under `dir` (PNG files in `images/` plus a CSV
/// manifest) and returns the manifest path and the records written.
pub fn generate_shapes(dir: &Path, config: &ShapesConfig) -> Result<(std::path::PathBuf, Vec<ImageRecord>)> {
    if !(0.0..=1.0).contains(&config.train_cooccurrence)
        || !(0.0..=1.0).contains(&config.audit_cooccurrence)
        || !(0.0..=1.0).contains(&config.train_label_noise)
    {
        return Err(AuditError::Config("rates must lie in [0, 1]".into()));
    }
    let n = config.train_per_class;
    let mut train = Vec::new();
    // Class 0 mirrors the correlation: its attribute rate is 1 - t.
    let c0_warm = round_count(n, 1.0 - config.train_cooccurrence);
    draw_group(&mut train, Split::Train, 0, true, c0_warm, config);
    draw_group(&mut train, Split::Train, 0, false, n - c0_warm, config);
    // Class 1 starts balanced and is thinned to the target rate.
    let c1_warm = round_count(n, config.train_cooccurrence);
    draw_group(&mut train, Split::Train, 1, true, c1_warm, config);
    draw_group(&mut train, Split::Train, 1, false, c1_warm.max(n - c1_warm), config);
    let records: Vec<ImageRecord> = train.iter().map(|d| d.record.clone()).collect();
    let kept = inject_bias(
        &records,
        &BiasSpec {
            attribute: ATTRIBUTE.to_string(),
            label: 1,
            target_cooccurrence: config.train_cooccurrence,
            seed: config.seed,
        },
    )?;

    let mut audit = Vec::new();
    let m = config.audit_per_class;
    for label in 0..2 {
        let warm = round_count(m, config.audit_cooccurrence);
        draw_group(&mut audit, Split::Audit, label, true, warm, config);
        draw_group(&mut audit, Split::Audit, label, false, m - warm, config);
    }

    let mut pixels: HashMap<String, RgbImage> = train
        .into_iter()
        .chain(audit.iter().map(|d| Drawn {
            record: d.record.clone(),
            pixels: d.pixels.clone(),
        }))
        .map(|d| (d.record.image_id, d.pixels))
        .collect();
    let mut all = kept;
    all.extend(audit.into_iter().map(|d| d.record));

    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| AuditError::io(&images, e))?;
    for r in &all {
        let img = pixels.remove(&r.image_id).expect("drawn");
        let path = dir.join(&r.path);
        img.save(&path).map_err(|e| AuditError::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    let manifest = dir.join("dataset.csv");
    write_csv_manifest(&manifest, &all)?;
    Ok((manifest, all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::cooccurrence;

    #[test]
    fn drawing_is_deterministic() {
        let c = ShapesConfig::default();
        assert_eq!(draw_shape(1, true, &c, 5), draw_shape(1, true, &c, 5));
        assert_ne!(draw_shape(1, true, &c, 5), draw_shape(1, true, &c, 6));
    }

    #[test]
    fn split_rates() {
        let dir = tempfile::tempdir().unwrap();
        let c = ShapesConfig {
            train_per_class: 100,
            audit_per_class: 50,
            ..ShapesConfig::default()
        };
        let (manifest, records) = generate_shapes(dir.path(), &c).unwrap();
        assert!(manifest.is_file());
        let train: Vec<_> = records.iter().filter(|r| r.split == Split::Train).cloned().collect();
        let audit: Vec<_> = records.iter().filter(|r| r.split == Split::Audit).cloned().collect();
        assert!((cooccurrence(&train, ATTRIBUTE, 1).unwrap() - 0.9).abs() <= 0.02);
        assert!((cooccurrence(&audit, ATTRIBUTE, 1).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(audit.len(), 100);
        for r in &records {
            assert!(dir.path().join(&r.path).is_file());
        }
    }
}
