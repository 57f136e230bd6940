//! The run configuration: one TOML document covering data generation,
//! preprocessing, networks, the training schedule and evaluation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_synthesis::EmbryoSpec;
use crate::error::{Error, Result};
use crate::gmi::Binarize;
use crate::networks::NetConfig;
use crate::preprocessing::PreprocessConfig;
use crate::training::TrainingSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_pairs: usize,
    pub embryo: EmbryoSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_pairs: 256,
            embryo: EmbryoSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    pub binarize: Binarize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: vec![0.1, 0.2, 0.3],
            binarize: Binarize::default(),
        }
    }
}

/// Defaults are the desk-scale setup: synthetic 64×64 data (so the
/// intermediate resize is 64), the narrow network ladder and the desk schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub network: NetConfig,
    pub training: TrainingSchedule,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: None,
            data: DataConfig::default(),
            preprocess: PreprocessConfig {
                intermediate_size: 64,
                ..PreprocessConfig::default()
            },
            network: NetConfig::desk(),
            training: TrainingSchedule::desk(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() as u64 + 1)
                .unwrap_or(0);
            Error::Parse {
                path: source.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.embryo.validate()?;
        self.preprocess.validate()?;
        self.network.validate()?;
        self.training.validate()?;
        if self.network.image_size != self.preprocess.crop_size {
            return Err(Error::validation(
                "network.image_size",
                format!(
                    "{} differs from preprocess.crop_size {}",
                    self.network.image_size, self.preprocess.crop_size
                ),
            ));
        }
        if self
            .eval
            .thresholds
            .iter()
            .any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::validation(
                "eval.thresholds",
                "each threshold must be in (0, 1]",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML form, excluding the output location.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Artifact directory name: short config hash plus seed.
    pub fn artifact_key(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.training.lr_s *= 2.0;
        assert_ne!(other.hash(), cfg.hash());
        let moved = RunConfig {
            output_dir: Some("/elsewhere".into()),
            ..cfg.clone()
        };
        assert_eq!(moved.hash(), cfg.hash());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::from_toml("seed = 5\n[training]\nwarmup_steps = 3\n", Path::new("c"))
            .unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.training.warmup_steps, 3);
        assert_eq!(cfg.training.joint_steps, 1200);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_reported() {
        match RunConfig::from_toml("seed = 1\n\n[training]\nbogus = 2\n", Path::new("c")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            RunConfig::from_toml("[training]\nrefine_decay = 0.0\n", Path::new("c")),
            Err(Error::Validation { .. })
        ));
    }
}
