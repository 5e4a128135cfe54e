//! Run configuration: one TOML file covering data synthesis, both models,
//! both trainers and the metric options. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{LogMelParams, StftParams};
use crate::datagen::SynthConfig;
use crate::sed::TsedBranchConfig;
use crate::separation::{DprnnConfig, MaskKind, SeparationConfig};
use crate::training::{LassTrainConfig, SedTrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsOptions {
    /// Evaluation segment length for the error rate and F1.
    pub segment_seconds: f64,
    /// Soft reference labels binarize at this value.
    pub label_binarize_threshold: f64,
    /// Where class thresholds are fitted: "eval" (on the evaluated scores)
    /// or "validation" (on the training folds, then applied to the
    /// evaluated scores).
    pub threshold_fit: String,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        Self {
            segment_seconds: 1.0,
            label_binarize_threshold: 0.5,
            threshold_fit: "eval".into(),
        }
    }
}

impl MetricsOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("segment_seconds must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_binarize_threshold) {
            return Err(Error::Config(
                "label_binarize_threshold must lie in [0, 1]".into(),
            ));
        }
        if self.threshold_fit != "eval" && self.threshold_fit != "validation" {
            return Err(Error::Config(format!(
                "threshold_fit must be 'eval' or 'validation', got '{}'",
                self.threshold_fit
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub separation: SeparationConfig,
    pub branch: TsedBranchConfig,
    pub mel: LogMelParams,
    pub lass_train: LassTrainConfig,
    pub sed_train: SedTrainConfig,
    pub metrics: MetricsOptions,
    /// Cross-validation folds for detector training.
    pub cv_folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            separation: SeparationConfig {
                sample_rate: 16_000,
                stft: StftParams::new(0.064, 0.01),
                widths: vec![32, 64, 128, 256],
                dprnn: Some(DprnnConfig::new(64)),
                embedding_dim: 64,
                mask_kind: MaskKind::MagnitudeMask,
            },
            branch: TsedBranchConfig::default(),
            mel: LogMelParams::default(),
            lass_train: LassTrainConfig::default(),
            sed_train: SedTrainConfig::default(),
            metrics: MetricsOptions::default(),
            cv_folds: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.metrics.validate()?;
        self.branch.validate()?;
        // Synth and separation sections validate at use; a default (empty)
        // synth section is legal until the synth command runs.
        Ok(())
    }

    /// Stable hash over the semantic configuration; embedded in reports so
    /// runs are auditable. Paths never enter the hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = 0xcbf29ce484222325_u64;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("unknown_key = 1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            RunConfig::from_toml("[sed_train]\nlearning_rate = 0.001\nbogus = 2").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn partial_configs_inherit_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[sed_train]\nbatch_size = 8").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sed_train.batch_size, 8);
        assert_eq!(cfg.sed_train.learning_rate, 1e-3);
        assert_eq!(cfg.lass_train.learning_rate, 1e-4);
        assert_eq!(cfg.cv_folds, 5);
    }

    #[test]
    fn bad_threshold_fit_is_rejected() {
        let err = RunConfig::from_toml("[metrics]\nthreshold_fit = \"nowhere\"").unwrap_err();
        assert!(err.to_string().contains("threshold_fit"));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
