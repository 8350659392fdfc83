//! Run configuration: a JSON file naming the mode, the synthetic tasks, and
//! any training knobs the caller wants to pin. Everything optional has a
//! per-mode default, so a minimal config is mode + tasks + train_steps.

use crate::error::{Error, Result};
use crate::pipeline::data::{check_specs, GeneratorKind, SyntheticTaskSpec};
use crate::pipeline::{Mode, OptimizerKind, RankMode, ScheduleKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// On-disk schema. Unknown keys are rejected so a typo like `learning_rte`
/// fails loudly instead of silently training with the default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    pub tasks: Vec<SyntheticTaskSpec>,
    pub train_steps: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warmup_steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_mode: Option<RankMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_samples: Option<usize>,
}

/// Config with every default filled in and all cross-field checks done.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub train: TrainConfig,
    pub width: usize,
    pub teacher_width: usize,
    pub tasks: Vec<SyntheticTaskSpec>,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let kind = match self.mode {
            Mode::Seg => GeneratorKind::ShapeSeg,
            Mode::Cls => GeneratorKind::PatternCls,
        };
        check_specs("config", &self.tasks, kind).map_err(|e| Error::Config(e.to_string()))?;
        let task_count = self.tasks.len();

        let width = self.width.unwrap_or(8);
        let teacher_width = self.teacher_width.unwrap_or(2 * width);
        if width < 4 || teacher_width < 4 {
            return Err(Error::Config(format!(
                "width {width} / teacher_width {teacher_width}: both must be at least 4"
            )));
        }

        // Per-mode defaults; segmentation favors AdamW at a small rate while
        // classification gets plain SGD with momentum.
        let (beta, learning_rate, optimizer) = match self.mode {
            Mode::Seg => (0.1, 1e-4, OptimizerKind::Adamw),
            Mode::Cls => (1.0, 0.05, OptimizerKind::SgdMomentum),
        };
        let train = TrainConfig {
            task_count,
            mode: self.mode,
            base_rank: self.base_rank.unwrap_or(8),
            beta: self.beta.unwrap_or(beta),
            tau: self.tau.unwrap_or(1.0),
            learning_rate: self.learning_rate.unwrap_or(learning_rate),
            optimizer: self.optimizer.unwrap_or(optimizer),
            schedule: self.schedule.unwrap_or(ScheduleKind::Constant),
            warmup_steps: self.warmup_steps.unwrap_or(self.train_steps / 10),
            train_steps: self.train_steps,
            batch_size: self.batch_size.unwrap_or(8),
            seed: self.seed.unwrap_or(0),
            rank_mode: self.rank_mode.unwrap_or(RankMode::Balanced),
        };
        train.validate().map_err(|e| Error::Config(e.to_string()))?;

        // The classification transfer term projects student features up to
        // the teacher's feature dimension, which pins the width ratio.
        if self.mode == Mode::Cls && train.beta > 0.0 && teacher_width != 2 * width {
            return Err(Error::Config(format!(
                "feature transfer needs teacher_width = 2 * width, got {teacher_width} vs width {width}"
            )));
        }

        let train_samples = self.train_samples.unwrap_or(64 * task_count);
        let eval_samples = self.eval_samples.unwrap_or(32 * task_count);
        if train_samples == 0 || eval_samples == 0 {
            return Err(Error::Config("train_samples and eval_samples must be positive".to_string()));
        }

        Ok(ResolvedConfig {
            train,
            width,
            teacher_width,
            tasks: self.tasks.clone(),
            train_samples,
            eval_samples,
        })
    }

    /// Hash over the canonical JSON serialization, so reformatting the file
    /// does not change provenance but any field change does.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

impl ResolvedConfig {
    pub fn image_size(&self) -> usize {
        self.tasks[0].image_size
    }

    /// Per-task label counts: class counts in cls mode, mask channel counts
    /// in seg mode.
    pub fn label_counts(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.label_count).collect()
    }
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::{cls_specs, seg_specs};

    fn minimal_cls() -> ConfigFile {
        ConfigFile {
            mode: Mode::Cls,
            tasks: cls_specs(&[4, 2], 8, 1.0),
            train_steps: 40,
            width: None,
            teacher_width: None,
            base_rank: None,
            beta: None,
            tau: None,
            learning_rate: None,
            optimizer: None,
            schedule: None,
            warmup_steps: None,
            batch_size: None,
            seed: None,
            rank_mode: None,
            train_samples: None,
            eval_samples: None,
        }
    }

    #[test]
    fn cls_defaults() {
        let r = minimal_cls().resolve().unwrap();
        assert_eq!(r.width, 8);
        assert_eq!(r.teacher_width, 16);
        assert_eq!(r.train.base_rank, 8);
        assert_eq!(r.train.beta, 1.0);
        assert_eq!(r.train.learning_rate, 0.05);
        assert_eq!(r.train.optimizer, OptimizerKind::SgdMomentum);
        assert_eq!(r.train.warmup_steps, 4);
        assert_eq!(r.train.batch_size, 8);
        assert_eq!(r.train_samples, 128);
        assert_eq!(r.eval_samples, 64);
        assert_eq!(r.label_counts(), vec![4, 2]);
        assert_eq!(r.image_size(), 8);
    }

    #[test]
    fn seg_defaults() {
        let cfg = ConfigFile {
            mode: Mode::Seg,
            tasks: seg_specs(&[2, 1, 3], 8),
            ..minimal_cls()
        };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.train.beta, 0.1);
        assert_eq!(r.train.learning_rate, 1e-4);
        assert_eq!(r.train.optimizer, OptimizerKind::Adamw);
        assert_eq!(r.train_samples, 192);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ConfigFile>(
            r#"{"mode":"cls","tasks":[],"train_steps":10,"learning_rte":0.1}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("learning_rte"), "{err}");
    }

    #[test]
    fn mode_and_task_kind_must_agree() {
        let cfg = ConfigFile { mode: Mode::Seg, ..minimal_cls() };
        let err = cfg.resolve().unwrap_err().to_string();
        assert!(err.contains("kind mismatch"), "{err}");
    }

    #[test]
    fn width_ratio_enforced_only_with_transfer() {
        let cfg = ConfigFile { teacher_width: Some(8), ..minimal_cls() };
        assert!(cfg.resolve().unwrap_err().to_string().contains("teacher_width"));
        let cfg = ConfigFile { teacher_width: Some(8), beta: Some(0.0), ..minimal_cls() };
        assert!(cfg.resolve().is_ok());
    }

    #[test]
    fn hash_tracks_fields_not_formatting() {
        let a = minimal_cls();
        let h1 = a.hash();
        // a reparse of differently formatted but identical JSON hashes the same
        let text = serde_json::to_string_pretty(&a).unwrap();
        let b: ConfigFile = serde_json::from_str(&text).unwrap();
        assert_eq!(h1, b.hash());
        let c = ConfigFile { seed: Some(1), ..a };
        assert_ne!(h1, c.hash());
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn minimal_json_round_trip_omits_unset_options() {
        let text = serde_json::to_string(&minimal_cls()).unwrap();
        assert!(!text.contains("width"), "{text}");
        let back: ConfigFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, minimal_cls());
    }
}
