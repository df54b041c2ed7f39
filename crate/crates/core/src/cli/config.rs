use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SplitFractions;
use crate::error::{Error, Result};
use crate::stats::{CorrelationBasis, DEFAULT_ALPHA, DEFAULT_K};

/// Settings for a full run. Loaded from a JSON file of the same shape, with
/// command-line flags taking precedence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: PathBuf,
    pub weights: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub alpha: f64,
    pub k: usize,
    /// Glob over tap ids; every tap when absent.
    pub taps: Option<String>,
    pub basis: CorrelationBasis,
    /// Train, validation and interpretability fractions.
    pub split: [f64; 3],
    pub seed: u64,
    /// Render feature maps for the ranked filters.
    pub render: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SplitFractions::default();
        Self {
            model: PathBuf::new(),
            weights: PathBuf::new(),
            data: PathBuf::new(),
            out: PathBuf::new(),
            alpha: DEFAULT_ALPHA,
            k: DEFAULT_K,
            taps: None,
            basis: CorrelationBasis::default(),
            split: [s.train, s.val, s.interp],
            seed: 0,
            render: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn fractions(&self) -> Result<SplitFractions> {
        SplitFractions::new(self.split[0], self.split[1], self.split[2])
    }

    pub fn validate(&self) -> Result<()> {
        self.fractions()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be a finite value >= 0, got {}", self.alpha)));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        for (flag, p) in [("--model", &self.model), ("--weights", &self.weights), ("--data", &self.data), ("--out", &self.out)] {
            if p.as_os_str().is_empty() {
                return Err(Error::Config(format!("{flag} is required")));
            }
        }
        if let Some(g) = &self.taps {
            glob::Pattern::new(g).map_err(|e| Error::Config(format!("bad tap glob `{g}`: {e}")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_partial_files() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.k, c.split), (1.0, 5, [0.70, 0.15, 0.15]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"alpha": 0.5, "basis": "coefficient_vectors"}"#).unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.basis, CorrelationBasis::CoefficientVectors);
        assert_eq!(c.k, 5);
        std::fs::write(&path, r#"{"alpah": 0.5}"#).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn validation() {
        let mut c = RunConfig {
            model: "m".into(),
            weights: "w".into(),
            data: "d".into(),
            out: "o".into(),
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.split = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        c.split = [0.8, 0.1, 0.1];
        c.k = 0;
        assert!(c.validate().is_err());
        c.k = 1;
        c.taps = Some("[".into());
        assert!(c.validate().is_err());
    }
}
