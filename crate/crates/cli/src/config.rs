//! Reads run and demo configuration from JSON or YAML files.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

/// Parses `path` as YAML when its extension is `yaml`/`yml`, JSON otherwise.
/// Unknown keys are rejected by the target types.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let yaml = matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("yaml" | "yml")
    );
    if yaml {
        serde_yaml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    } else {
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Loads `path` if given, otherwise the type's defaults.
pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use audit_core::pipeline::PipelineConfig;

    #[test]
    fn yaml_and_json_agree() {
        let dir = tempfile::tempdir().unwrap();
        let y = dir.path().join("c.yaml");
        let j = dir.path().join("c.json");
        std::fs::write(&y, "model: m.ckpt\ntop_rate: 0.05\npatches:\n  patch_size: 16\n").unwrap();
        std::fs::write(&j, r#"{"model":"m.ckpt","top_rate":0.05,"patches":{"patch_size":16}}"#).unwrap();
        let a: PipelineConfig = load(&y).unwrap();
        let b: PipelineConfig = load(&j).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.patches.patch_size, 16);
        assert_eq!(a.patches.masks_per_image, PipelineConfig::default().patches.masks_per_image);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.yml");
        std::fs::write(&p, "modle: x\n").unwrap();
        assert!(load::<PipelineConfig>(&p).is_err());
    }
}
