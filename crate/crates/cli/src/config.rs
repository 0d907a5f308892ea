use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tucl::phantom::PhantomSpec;
use tucl::trainer::TrainConfig;
use tucl::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub case: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyOptions {
    /// Overrides the checkpoint's dropout rate for the stochastic passes.
    pub dropout: Option<f64>,
    /// Defaults to `train.t_eval`.
    pub samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub n: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { n: 40 }
    }
}

/// Everything a command needs; every field has a default and flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Voxel edge length in mm.
    pub spacing: f64,
    pub gen: GenOptions,
    pub phantom: PhantomSpec,
    pub train: TrainConfig,
    pub uncertainty: UncertaintyOptions,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            spacing: 1.0,
            gen: GenOptions::default(),
            phantom: PhantomSpec::default(),
            train: TrainConfig::default(),
            uncertainty: UncertaintyOptions::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML. The output
    /// directory is left out so a rerun elsewhere stamps the same hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Comment line written at the top of every CSV.
    pub fn stamp(&self) -> String {
        format!("tucl {} config={}", env!("CARGO_PKG_VERSION"), self.hash())
    }

    pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("missing {flag} (flag or [paths] entry)")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: RunConfig = toml::from_str("spacing = 2.0\n[train]\nsteps = 7\n").unwrap();
        assert_eq!(c.spacing, 2.0);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }
}
