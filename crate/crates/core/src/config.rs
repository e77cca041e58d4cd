//! JSON run configuration. Every field is optional; a value given on the
//! command line wins over the file, and the file wins over the built-in
//! default. Unknown keys are rejected so typos surface immediately.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    // synthetic model
    pub d: Option<usize>,
    pub d_ff: Option<usize>,
    pub layers: Option<usize>,
    pub components: Option<usize>,
    pub probes: Option<usize>,
    // moefication
    pub experts: Option<usize>,
    pub max_iters: Option<usize>,
    pub reference_scale: Option<f32>,
    // thresholds and schedule
    pub tau_min: Option<f64>,
    pub tau_warm: Option<f64>,
    pub rounds: Option<usize>,
    pub warmup_rounds: Option<usize>,
    pub taus: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
    pub delta: Option<f32>,
    pub soft_rounds: Option<usize>,
    pub hard_rounds: Option<usize>,
    // optimisation
    pub eta: Option<f64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub init_scale: Option<f32>,
    pub seed: Option<u64>,
    // bench
    pub mode: Option<String>,
    pub top_k: Option<usize>,
    // paths
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub router: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Flag, then config value, then default.
pub fn resolve<T>(flag: Option<T>, config: Option<T>, default: T) -> T {
    flag.or(config).unwrap_or(default)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"tau_mni": 0.5}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"tau_min": 0.5, "ks": [1, 2]}"#).unwrap();
        assert_eq!(cfg.tau_min, Some(0.5));
        assert_eq!(cfg.ks, Some(vec![1, 2]));
    }

    #[test]
    fn precedence() {
        assert_eq!(resolve(Some(1), Some(2), 3), 1);
        assert_eq!(resolve(None, Some(2), 3), 2);
        assert_eq!(resolve(None, None, 3), 3);
    }
}
