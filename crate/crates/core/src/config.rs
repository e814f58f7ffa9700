//! Flat run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::hvq::{HvqConfig, TrainConfig};
use crate::lavit::{LavitConfig, TargetMode};
use crate::synthgen::DatasetCounts;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Every knob of a run. Unknown JSON fields are rejected; missing ones take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_mask: u64,
    pub seed_eval: u64,

    pub train_normal: usize,
    /// Share of the normal training images held out for score calibration.
    pub calib_fraction: f64,
    pub test_normal: usize,
    pub test_logical: usize,
    pub test_structural: usize,

    pub patch: usize,
    pub pool: usize,
    /// Backbone feature width `d0`.
    pub feature_dim: usize,

    pub hvq_dim: usize,
    /// Encoder depth, decoder depth and codebook count `L`.
    pub hvq_depth: usize,
    pub hvq_heads: usize,
    pub hvq_mlp_dim: usize,
    /// Entries per codebook. Small books make each code stand for a whole
    /// object part, which is what the masked-histogram target needs.
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hvq_epochs: usize,
    pub hvq_batch_size: usize,
    pub hvq_lr: f64,
    pub hvq_weight_decay: f64,
    pub reset_dead_codes: bool,
    /// Linear learning-rate warmup, in optimizer steps, for both stages.
    pub warmup_steps: u64,

    pub lavit_dim: usize,
    /// `L'`.
    pub lavit_depth: usize,
    pub lavit_heads: usize,
    pub lavit_mlp_dim: usize,
    pub lavit_epochs: usize,
    pub lavit_batch_size: usize,
    pub lavit_lr: f64,
    pub lavit_weight_decay: f64,
    pub target: TargetMode,
    pub mask_ratio: f64,
    pub n_masks: usize,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed_data: 0,
            seed_init: 0,
            seed_mask: 0,
            seed_eval: 0,
            train_normal: 200,
            calib_fraction: 0.2,
            test_normal: 50,
            test_logical: 50,
            test_structural: 50,
            patch: 4,
            pool: 1,
            feature_dim: 64,
            hvq_dim: 32,
            hvq_depth: 4,
            hvq_heads: 4,
            hvq_mlp_dim: 64,
            codebook_size: 4,
            code_dim: 8,
            hvq_epochs: 40,
            hvq_batch_size: 8,
            hvq_lr: 1e-3,
            hvq_weight_decay: 1e-4,
            reset_dead_codes: true,
            warmup_steps: 10,
            lavit_dim: 32,
            lavit_depth: 4,
            lavit_heads: 4,
            lavit_mlp_dim: 64,
            lavit_epochs: 150,
            lavit_batch_size: 8,
            lavit_lr: 1e-3,
            lavit_weight_decay: 1e-6,
            target: TargetMode::Histogram,
            mask_ratio: 0.4,
            n_masks: 32,
            data_dir: PathBuf::from("run/data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Sets all four seeds at once.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_data = seed;
        self.seed_init = seed;
        self.seed_mask = seed;
        self.seed_eval = seed;
        self
    }

    pub fn dataset_counts(&self) -> DatasetCounts {
        DatasetCounts {
            train_normal: self.train_normal,
            calib_fraction: self.calib_fraction,
            test_normal: self.test_normal,
            test_logical: self.test_logical,
            test_structural: self.test_structural,
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            patch: self.patch,
            pool: self.pool,
            out_dim: self.feature_dim,
        }
    }

    /// Side of the pixel square covered by one token.
    pub fn cell(&self) -> usize {
        self.patch * self.pool
    }

    pub fn grid(&self, width: usize, height: usize) -> (usize, usize) {
        (height / self.cell(), width / self.cell())
    }

    pub fn hvq(&self, tokens: usize) -> HvqConfig {
        HvqConfig {
            in_dim: self.feature_dim,
            dim: self.hvq_dim,
            depth: self.hvq_depth,
            heads: self.hvq_heads,
            mlp_dim: self.hvq_mlp_dim,
            codebook_size: self.codebook_size,
            code_dim: self.code_dim,
            tokens,
        }
    }

    pub fn hvq_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.hvq_epochs,
            batch_size: self.hvq_batch_size,
            lr: self.hvq_lr,
            weight_decay: self.hvq_weight_decay,
            seed: self.seed_init,
            reset_dead_codes: self.reset_dead_codes,
            warmup_steps: self.warmup_steps,
        }
    }

    pub fn lavit(&self, grid_h: usize, grid_w: usize, mode: TargetMode) -> LavitConfig {
        LavitConfig {
            in_dim: self.feature_dim,
            dim: self.lavit_dim,
            depth: self.lavit_depth,
            heads: self.lavit_heads,
            mlp_dim: self.lavit_mlp_dim,
            grid_h,
            grid_w,
            codebook_size: self.codebook_size,
            hvq_depth: self.hvq_depth,
            pixel_dim: 3 * self.cell() * self.cell(),
            mode,
        }
    }

    pub fn lavit_train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.lavit_epochs,
            batch_size: self.lavit_batch_size,
            lr: self.lavit_lr,
            weight_decay: self.lavit_weight_decay,
            seed: self.seed_init,
            reset_dead_codes: false,
            warmup_steps: self.warmup_steps,
        }
    }

    /// Checks every field that training or evaluation would otherwise trip
    /// over later.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let positive = [
            ("train_normal", self.train_normal),
            ("patch", self.patch),
            ("pool", self.pool),
            ("feature_dim", self.feature_dim),
            ("hvq_dim", self.hvq_dim),
            ("hvq_depth", self.hvq_depth),
            ("hvq_heads", self.hvq_heads),
            ("hvq_mlp_dim", self.hvq_mlp_dim),
            ("code_dim", self.code_dim),
            ("hvq_batch_size", self.hvq_batch_size),
            ("lavit_dim", self.lavit_dim),
            ("lavit_depth", self.lavit_depth),
            ("lavit_heads", self.lavit_heads),
            ("lavit_mlp_dim", self.lavit_mlp_dim),
            ("lavit_batch_size", self.lavit_batch_size),
            ("n_masks", self.n_masks),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2".into());
        }
        if self.hvq_dim % self.hvq_heads != 0 {
            return bad(format!("hvq_dim {} not divisible by hvq_heads {}", self.hvq_dim, self.hvq_heads));
        }
        if self.lavit_dim % self.lavit_heads != 0 {
            return bad(format!(
                "lavit_dim {} not divisible by lavit_heads {}",
                self.lavit_dim, self.lavit_heads
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return bad(format!("calib_fraction {} outside (0, 1)", self.calib_fraction));
        }
        let n_val = (self.train_normal as f64 * self.calib_fraction).round() as usize;
        if n_val < 2 || n_val >= self.train_normal {
            return bad(format!(
                "calibration split of {n_val} images out of {} is unusable",
                self.train_normal
            ));
        }
        for (name, lr) in [("hvq_lr", self.hvq_lr), ("lavit_lr", self.lavit_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, wd) in [
            ("hvq_weight_decay", self.hvq_weight_decay),
            ("lavit_weight_decay", self.lavit_weight_decay),
        ] {
            if !(wd.is_finite() && wd >= 0.0) {
                return bad(format!("{name} must be non-negative"));
            }
        }
        if self.test_normal == 0 || self.test_logical + self.test_structural == 0 {
            return bad("test split needs normal and anomalous images".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!((c.hvq_depth, c.lavit_depth), (4, 4));
        assert_eq!((c.hvq_weight_decay, c.lavit_weight_decay), (1e-4, 1e-6));
    }

    #[test]
    fn partial_json_takes_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"n_masks": 3, "target": "codes"}"#).unwrap();
        assert_eq!(c.n_masks, 3);
        assert_eq!(c.target, TargetMode::Codes);
        assert_eq!(c.hvq_epochs, RunConfig::default().hvq_epochs);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::default();
        c.mask_ratio = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.hvq_heads = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.codebook_size = 1;
        assert!(c.validate().is_err());
    }
}
