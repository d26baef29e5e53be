use std::fs;
use std::path::{Path, PathBuf};

use lsec_core::datagen::{GenConfig, SplitSpec};
use lsec_core::influence::AnalysisConfig;
use lsec_core::model::ModelConfig;
use lsec_core::trainer::TrainConfig;
use lsec_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Missing sections take their defaults; unknown keys
/// are rejected at every level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub gen: GenConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Raw dataset or split directory. Absent means generate from `gen`.
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub repeat_count: usize,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            data_dir: None,
            output_dir: None,
            repeat_count: 5,
        }
    }
}

impl RunManifest {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.repeat_count == 0 {
            return Err(Error::Config("repeat_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunManifest::from_json("{}").unwrap(), RunManifest::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_depth() {
        for doc in [
            r#"{"bogus": 1}"#,
            r#"{"train": {"learning_rate": 0.1}}"#,
            r#"{"model": {"embed": 3}}"#,
            r#"{"gen": {"users": 3}}"#,
        ] {
            let err = RunManifest::from_json(doc).unwrap_err();
            assert_eq!(err.exit_code(), 1, "{doc}");
        }
    }

    #[test]
    fn echo_round_trips() {
        let m = RunManifest::from_json(r#"{"train": {"lr": 0.002, "seed": 9}, "repeat_count": 2}"#).unwrap();
        assert_eq!(m.train.seed, 9);
        assert_eq!(m.model, ModelConfig::default());
        let back = RunManifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            RunManifest::from_json(r#"{"repeat_count": 0}"#),
            Err(Error::Config(_))
        ));
        assert!(RunManifest::from_json(r#"{"split": {"train_frac": 0.9}}"#).is_err());
    }
}
