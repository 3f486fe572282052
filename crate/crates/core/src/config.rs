//! The JSON run configuration shared by every pipeline command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::ThresholdPolicy;
use crate::knn::FusionConfig;
use crate::losses::{CosentConfig, SimcseConfig};
use crate::trainer::{Objective, TrainConfig};

/// Environment variable that overrides the config file's seed when no
/// `--seed` flag is given.
pub const SEED_ENV: &str = "CSDR_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// One sentence per line, for pre-training.
    pub corpus: Option<PathBuf>,
    /// Labeled pairs, TSV or JSONL.
    pub pairs: Option<PathBuf>,
    /// Documents to index, one per line.
    pub docs: Option<PathBuf>,
    /// Existing vocabulary; built from corpus and training pairs when absent.
    pub vocab: Option<PathBuf>,
    /// A previous run directory (`vocab.txt` + `checkpoint.bin`): the initial
    /// encoder for `finetune`, the model for `evaluate` and `index`.
    pub model: Option<PathBuf>,
    /// Pairs to evaluate in full; the held-out split of `pairs` otherwise.
    pub eval_pairs: Option<PathBuf>,
    pub min_freq: usize,
    pub split_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            pairs: None,
            docs: None,
            vocab: None,
            model: None,
            eval_pairs: None,
            min_freq: 1,
            split_ratio: 0.8,
        }
    }
}

/// Optimization settings for one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_peak: t.lr_peak,
            lr_min: t.lr_min,
            warmup_fraction: t.warmup_fraction,
        }
    }
}

impl PhaseConfig {
    pub fn train_config(&self, seed: u64, objective: Objective) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_peak: self.lr_peak,
            lr_min: self.lr_min,
            warmup_fraction: self.warmup_fraction,
            seed,
            objective,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    /// Run SimCSE pre-training before fine-tuning.
    pub use_pretrain: bool,
    pub pretrain: PhaseConfig,
    pub objective: Objective,
    pub finetune: PhaseConfig,
    pub simcse: SimcseConfig,
    pub cosent: CosentConfig,
    /// Blend the classifier with a KNN vote over the training pairs.
    pub use_knn: bool,
    pub fusion: FusionConfig,
    pub threshold: ThresholdPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            use_pretrain: true,
            pretrain: PhaseConfig::default(),
            objective: Objective::Cosent,
            finetune: PhaseConfig::default(),
            simcse: SimcseConfig::default(),
            cosent: CosentConfig::default(),
            use_knn: true,
            fusion: FusionConfig::default(),
            threshold: ThresholdPolicy::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.train_config(self.seed, Objective::Simcse)
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.finetune.train_config(self.seed, self.objective)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        self.simcse.validate()?;
        self.cosent.validate()?;
        self.fusion.validate()?;
        if self.objective == Objective::Simcse {
            return Err(Error::InvalidConfig(
                "objective must be cosent, cosine_pair or sbert_head".into(),
            ));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "data.split_ratio {} not in (0, 1)",
                self.data.split_ratio
            )));
        }
        if self.data.min_freq == 0 {
            return Err(Error::InvalidConfig("data.min_freq must be at least 1".into()));
        }
        if let ThresholdPolicy::Fixed { threshold } = self.threshold {
            if !threshold.is_finite() {
                return Err(Error::InvalidConfig("threshold must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Seed precedence: explicit flag, then the config file, then `CSDR_SEED`,
/// then the default 0.
pub fn resolve_seed(flag: Option<u64>, file_seed: Option<u64>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = flag.or(file_seed) {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not a u64"))),
        None => Ok(0),
    }
}

/// Reads the `seed` key of a config document, if present.
pub fn file_seed(text: &str) -> Result<Option<u64>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    match value.get("seed") {
        None => Ok(None),
        Some(v) => v
            .as_u64()
            .map(Some)
            .ok_or_else(|| Error::InvalidConfig("seed must be a non-negative integer".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig {
            seed: 9,
            threshold: ThresholdPolicy::BestF1,
            ..RunConfig::default()
        };
        cfg.encoder.embed_dim = 8;
        cfg.data.pairs = Some("x/pairs.tsv".into());
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"encoder": {"dim": 8}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fusion": {"w": 0.3, "kk": 5}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"pretrain": {"epochs": 10}}"#).unwrap();
        assert_eq!(cfg.pretrain.epochs, 10);
        assert_eq!(cfg.pretrain.batch_size, 32);
        assert_eq!(cfg.pretrain_config().objective, Objective::Simcse);
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig {
            objective: Objective::Simcse,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.data.split_ratio = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.fusion.w = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(1), Some(2), Some("3")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(2), Some("3")).unwrap(), 2);
        assert_eq!(resolve_seed(None, None, Some("3")).unwrap(), 3);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, None, Some("x")).is_err());
        assert_eq!(file_seed(r#"{"seed": 4}"#).unwrap(), Some(4));
        assert_eq!(file_seed("{}").unwrap(), None);
    }
}
