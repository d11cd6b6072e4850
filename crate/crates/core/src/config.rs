//! Experiment configuration: every knob with its default, TOML in and out,
//! range validation and a stable content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::model::{LossWeights, ModelConfig};
use crate::world::{AugParams, DatasetSpec, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub labeled_fraction: f64,
    /// Sequences in the held-out test split (generated from a separate seed).
    pub test_sequences: usize,
    pub world: WorldConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_sequences: 40, seq_len: 4, labeled_fraction: 0.25, test_sequences: 8, world: WorldConfig::default() }
    }
}

/// Where the uncertainty exponent's β comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    /// The fixed `model.head.beta` hyperparameter.
    #[default]
    Hyper,
    /// The sample's active-selection score of the current round.
    SampleScore,
}

/// Update rule of the teacher refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RefineOptimizer {
    /// Plain gradient descent, step clamped to the stability bound.
    #[default]
    Gd,
    /// Adam at `refine_lr`, no clamp.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Supervised steps that produce the initial teacher.
    pub init_steps: usize,
    pub lr: f64,
    /// Learning rate is multiplied by this factor once `lr_decay_at` of the
    /// initial steps have run.
    pub lr_decay: f64,
    pub lr_decay_at: f64,
    pub grad_clip: f64,
    pub rounds: usize,
    pub steps_per_round: usize,
    pub student_lr: f64,
    /// EMA coefficient per student step (α).
    pub alpha: f64,
    /// Weight of the importance penalty (η).
    pub eta: f64,
    pub refine_steps: usize,
    pub refine_lr: f64,
    pub refine_optimizer: RefineOptimizer,
    /// Sequences promoted per round, as a fraction of the initial unlabeled pool (m).
    pub promote_fraction: f64,
    pub score_thresh: f64,
    /// Cap on unlabeled frames used for the importance expectation.
    pub importance_samples: usize,
    pub beta_mode: BetaMode,
    pub use_uncertainty: bool,
    pub use_reflective: bool,
    pub weak_aug: AugParams,
    pub strong_aug: AugParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            init_steps: 600,
            lr: 3e-3,
            lr_decay: 0.3,
            lr_decay_at: 0.7,
            grad_clip: 10.0,
            rounds: 3,
            steps_per_round: 200,
            student_lr: 1e-3,
            alpha: 0.999,
            eta: 1.0,
            refine_steps: 50,
            refine_lr: 1e-3,
            refine_optimizer: RefineOptimizer::Gd,
            promote_fraction: 0.05,
            score_thresh: 0.5,
            importance_samples: 16,
            beta_mode: BetaMode::Hyper,
            use_uncertainty: true,
            use_reflective: true,
            weak_aug: AugParams { dropout_rate: 0.0, amp_jitter: 0.0, ..AugParams::default() },
            strong_aug: AugParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogConfig {
    /// Record wall-clock milliseconds in metrics.csv. Off by default so that
    /// identical configurations give byte-identical files.
    pub wall_clock: bool,
    /// Emit a loss row every this many steps.
    pub every: usize,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self { wall_clock: false, every: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub log: LogConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            seed: 7,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            log: LogConfig::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(config_err!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(config_err!("{name} must be finite and > 0, got {v}"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// The small two-phase benchmark: a data-limited world where a 25% label
    /// split leaves clear headroom, a teacher trained to its plateau, then
    /// three semi-supervised rounds.
    pub fn two_phase(seed: u64, labeled_fraction: f64) -> Self {
        let mut c = Self { seed, ..Self::default() };
        let w = &mut c.dataset.world;
        w.grid = 24;
        w.world_size = 24.0;
        w.min_objects = 2;
        w.max_objects = 4;
        c.dataset.n_sequences = 12;
        c.dataset.seq_len = 3;
        c.dataset.labeled_fraction = labeled_fraction;
        c.dataset.test_sequences = 20;
        c.model.channels = 8;
        c.loss.gamma = 0.1;
        c.loss.kappa = 1.0;
        let t = &mut c.train;
        t.init_steps = 1000;
        t.lr = 0.01;
        t.rounds = 3;
        t.steps_per_round = 200;
        t.student_lr = 3e-3;
        t.alpha = 0.99;
        t.eta = 1.0;
        t.refine_steps = 50;
        t.refine_lr = 1e-3;
        t.refine_optimizer = RefineOptimizer::Adam;
        t.promote_fraction = 0.1;
        t.score_thresh = 0.5;
        t.importance_samples = 8;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return Err(config_err!("run_id must be non-empty and free of commas, quotes and newlines"));
        }
        self.dataset_spec().validate()?;
        if self.dataset.test_sequences == 0 {
            return Err(config_err!("test_sequences must be >= 1"));
        }
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        positive("train.lr", t.lr)?;
        positive("train.student_lr", t.student_lr)?;
        positive("train.refine_lr", t.refine_lr)?;
        positive("train.grad_clip", t.grad_clip)?;
        unit("train.lr_decay", t.lr_decay)?;
        unit("train.lr_decay_at", t.lr_decay_at)?;
        unit("train.alpha", t.alpha)?;
        unit("train.promote_fraction", t.promote_fraction)?;
        unit("train.score_thresh", t.score_thresh)?;
        if !(t.eta.is_finite() && t.eta >= 0.0) {
            return Err(config_err!("train.eta must be finite and >= 0"));
        }
        for (n, a) in [("weak_aug", &t.weak_aug), ("strong_aug", &t.strong_aug)] {
            if a.max_shift_cells < 0 || a.dropout_patch == 0 {
                return Err(config_err!("{n}: max_shift_cells must be >= 0 and dropout_patch >= 1"));
            }
            unit(&format!("{n}.flip_prob"), a.flip_prob)?;
            unit(&format!("{n}.dropout_rate"), a.dropout_rate)?;
            unit(&format!("{n}.amp_jitter"), a.amp_jitter)?;
        }
        if self.log.every == 0 {
            return Err(config_err!("log.every must be >= 1"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed,
            n_sequences: self.dataset.n_sequences,
            seq_len: self.dataset.seq_len,
            labeled_fraction: self.dataset.labeled_fraction,
            world: self.dataset.world.clone(),
        }
    }

    pub fn test_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: crate::rng::derive_seed(self.seed, "test-split", 0),
            n_sequences: self.dataset.test_sequences,
            labeled_fraction: 1.0,
            ..self.dataset_spec()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err!("{e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical TOML form, ignoring `run_id` and logging.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_id = String::new();
        c.log = LogConfig::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_ignores_run_id_but_not_hyperparameters() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { run_id: "other".into(), ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.eta = 2.0;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_out_of_range() {
        for text in [
            "[train]\nalpha = 1.5",
            "[dataset]\nlabeled_fraction = 0.0",
            "[loss]\ngamma = -1.0",
            "[model.head]\ndelta = 1.0",
            "[train]\nunknown_key = 3",
        ] {
            assert!(ExperimentConfig::from_toml_str(text).is_err(), "{text}");
        }
        let partial = ExperimentConfig::from_toml_str("seed = 3\n[train]\nrounds = 0").unwrap();
        assert_eq!((partial.seed, partial.train.rounds), (3, 0));
    }
}
