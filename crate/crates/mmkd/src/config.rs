//! Run configuration: hyperparameters, schedule, dataset geometry, and
//! ablation switches. Loadable from a TOML file with every field optional
//! (defaults below); the CLI applies flag overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::WeightingStrategy;
use crate::data::DEFAULT_BLOB_SPREAD;
use crate::error::{MmkdError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Teacher-weighting rule for the run.
    pub strategy: WeightingStrategy,
    /// Coefficient of the feature-matching loss.
    pub alpha: f64,
    /// Coefficient of the ensemble KL loss.
    pub beta: f64,
    /// Softmax temperature for distillation terms.
    pub tau: f64,
    /// Inner-loop steps M for the meta update.
    pub inner_steps: usize,
    /// One meta update every this many training batches.
    pub meta_period: usize,
    /// Meta optimizer (Adam) learning rate.
    pub meta_lr: f64,
    /// Hard buffer capacity.
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Initial student learning rate; multiplied by `lr_decay_factor` at
    /// each epoch listed in `lr_decay_epochs`.
    pub student_lr: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Seeds for multi-trial runs; mean and std are reported over them.
    pub seeds: Vec<u64>,
    /// Row-L2-normalize similarity matrices before the feature head.
    pub normalize_similarity: bool,

    // Synthetic dataset geometry.
    pub classes: usize,
    pub per_class: usize,
    pub n_in: usize,
    pub spread: f64,
    pub data_seed: u64,

    // Ablation switches; at most one may be set.
    pub no_hard_buffer: bool,
    pub uniform_wr: bool,
    pub uniform_wf: bool,
    pub no_feature_loss: bool,
    /// Replace the hard buffer with a held-out split of the train set.
    pub holdout: bool,

    /// Also write per-batch loss rows next to the epoch metrics.
    pub log_batches: bool,
    /// Record real wall-clock seconds in the metrics CSV. Off by default so
    /// identical-seed runs produce byte-identical files; the run summary
    /// always reports real timing regardless.
    pub record_wall_clock: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            strategy: WeightingStrategy::Mmkd,
            alpha: 1.0,
            beta: 10.0,
            tau: 4.0,
            inner_steps: 1,
            meta_period: 5,
            meta_lr: 1e-3,
            buffer_capacity: 512,
            batch_size: 64,
            epochs: 40,
            student_lr: 0.05,
            lr_decay_epochs: vec![25, 35],
            lr_decay_factor: 0.1,
            seeds: vec![1, 2, 3],
            normalize_similarity: false,
            classes: 10,
            per_class: 600,
            n_in: 32,
            spread: DEFAULT_BLOB_SPREAD,
            data_seed: 0,
            no_hard_buffer: false,
            uniform_wr: false,
            uniform_wf: false,
            no_feature_loss: false,
            holdout: false,
            log_batches: false,
            record_wall_clock: false,
        }
    }
}

impl DistillConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: DistillConfig = toml::from_str(&text)
            .map_err(|e| MmkdError::config(format!("cannot parse {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn ablation_flags(&self) -> Vec<&'static str> {
        let mut on = Vec::new();
        if self.no_hard_buffer {
            on.push("no_hard_buffer");
        }
        if self.uniform_wr {
            on.push("uniform_wr");
        }
        if self.uniform_wf {
            on.push("uniform_wf");
        }
        if self.no_feature_loss {
            on.push("no_feature_loss");
        }
        if self.holdout {
            on.push("holdout");
        }
        on
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(MmkdError::config("alpha and beta must be nonnegative"));
        }
        if self.tau <= 0.0 {
            return Err(MmkdError::config("tau must be positive"));
        }
        if self.meta_period == 0 {
            return Err(MmkdError::config("meta_period must be at least 1"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MmkdError::config("batch_size and epochs must be positive"));
        }
        if self.buffer_capacity == 0 {
            return Err(MmkdError::config("buffer_capacity must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(MmkdError::config("need at least one seed"));
        }
        if self.student_lr <= 0.0 || self.meta_lr < 0.0 {
            return Err(MmkdError::config(
                "student_lr must be positive and meta_lr nonnegative",
            ));
        }
        let flags = self.ablation_flags();
        if flags.len() > 1 {
            return Err(MmkdError::config(format!(
                "ablation flags are mutually exclusive, got {}",
                flags.join("+")
            )));
        }
        Ok(())
    }

    /// Learning rate in effect at a given epoch (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self
            .lr_decay_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count();
        self.student_lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_settings() {
        let c = DistillConfig::default();
        assert_eq!(c.alpha, 1.0);
        assert_eq!(c.beta, 10.0);
        assert_eq!(c.tau, 4.0);
        assert_eq!(c.meta_period, 5);
        assert_eq!(c.meta_lr, 1e-3);
        assert_eq!(c.inner_steps, 1);
        assert_eq!(c.buffer_capacity, 512);
        assert_eq!(c.seeds.len(), 3);
        c.validate().unwrap();
    }

    #[test]
    fn lr_schedule_steps_down_at_decay_epochs() {
        let c = DistillConfig::default();
        assert_eq!(c.lr_at(0), 0.05);
        assert_eq!(c.lr_at(24), 0.05);
        assert!((c.lr_at(25) - 0.005).abs() < 1e-12);
        assert!((c.lr_at(35) - 0.0005).abs() < 1e-12);
    }

    #[test]
    fn multiple_ablation_flags_are_rejected() {
        let mut c = DistillConfig::default();
        c.uniform_wr = true;
        c.uniform_wf = true;
        assert!(matches!(c.validate(), Err(MmkdError::Config(_))));
        c.uniform_wf = false;
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "strategy = \"ebkd\"\nbeta = 100.0\nepochs = 3\n").unwrap();
        let c = DistillConfig::load(&p).unwrap();
        assert_eq!(c.strategy, WeightingStrategy::Ebkd);
        assert_eq!(c.beta, 100.0);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.tau, 4.0);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "betaa = 1.0\n").unwrap();
        assert!(matches!(
            DistillConfig::load(&p),
            Err(MmkdError::Config(_))
        ));
    }
}
