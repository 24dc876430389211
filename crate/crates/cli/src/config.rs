use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ipr_core::datasets::DatasetSpec;
use ipr_core::model::ModelSpec;
use ipr_core::training::OptimConfig;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Reads `path`, applies `--a.b=value` overrides, then `IPR_SEED`.
    pub fn load(path: &Path, overrides: &[String]) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        let mut cfg = cfg.with_overrides(overrides)?;
        if let Ok(s) = std::env::var("IPR_SEED") {
            cfg.seed = s.trim().parse().map_err(|_| UsageError(format!("IPR_SEED={s:?} is not a non-negative integer")))?;
        }
        cfg.model.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn with_overrides(self, overrides: &[String]) -> anyhow::Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for raw in overrides {
            let (path, value) = parse_override(raw)?;
            set_path(&mut doc, &path, value)?;
        }
        Ok(serde_json::from_value(doc).map_err(|e| UsageError(format!("after overrides: {e}")))?)
    }
}

fn parse_override(raw: &str) -> anyhow::Result<(Vec<String>, Value)> {
    let body = raw.strip_prefix("--").unwrap_or(raw);
    let Some((path, value)) = body.split_once('=') else {
        bail!(UsageError(format!("override {raw:?} must look like --section.key=value")));
    };
    if path.is_empty() {
        bail!(UsageError(format!("override {raw:?} has an empty key")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((path.split('.').map(str::to_string).collect(), value))
}

fn set_path(doc: &mut Value, path: &[String], value: Value) -> anyhow::Result<()> {
    let mut node = doc;
    for (i, key) in path.iter().enumerate() {
        let Some(obj) = node.as_object_mut() else {
            bail!(UsageError(format!("{} is not a section", path[..i].join("."))));
        };
        let Some(child) = obj.get_mut(key) else {
            bail!(UsageError(format!("unknown config key {}", path[..=i].join("."))));
        };
        node = child;
    }
    *node = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        serde_json::from_str(r#"{"dataset":{"name":"trees_leafcount","depth":2,"n_samples":10}}"#).unwrap()
    }

    #[test]
    fn overrides_replace_values() {
        let cfg = base().with_overrides(&["--model.m=4".into(), "optim.lr_base=0.5".into(), "--dataset.depth=3".into()]).unwrap();
        assert_eq!(cfg.model.m, 4);
        assert_eq!(cfg.optim.lr_base, 0.5);
        assert!(matches!(cfg.dataset, DatasetSpec::TreesLeafcount { depth: 3, .. }));
        let cfg = base().with_overrides(&["--model.virtual_init=identity".into()]).unwrap();
        assert_eq!(cfg.model.virtual_init, ipr_core::model::VirtualInit::Identity);
    }

    #[test]
    fn bad_overrides_are_usage_errors() {
        for bad in ["--model.nope=1", "--model.m", "--seed.x=1", "--model.m=\"two\""] {
            let err = base().with_overrides(&[bad.into()]).unwrap_err();
            assert!(err.downcast_ref::<UsageError>().is_some(), "{bad}: {err}");
        }
    }
}
