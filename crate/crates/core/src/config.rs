//! Flat, typed run configuration and named random sub-streams.
//!
//! A config file is a TOML document of top-level `key = value` pairs; unknown
//! keys are rejected. Values resolve as flags > file > defaults.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Loss, NetworkArchitecture};
use crate::organism::{OrganismArchitecture, SgdConfig};
use crate::particle::{FixpointMargin, Thresholds};
use crate::train::{ScheduleMode, TrainingSchedule};

/// Environment variable naming the default MNIST directory.
pub const DATA_DIR_ENV: &str = "ORGANISM_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; multi-seed runs use `seed, seed + 1, ...`.
    pub seed: u64,
    pub n_seeds: usize,
    pub deterministic: bool,
    /// Worker threads, 0 for the runtime default.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    /// Input checkpoint for `robustness`, `dropout-compare` and `resub-check`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,

    pub particle_layers: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub zero_threshold: f64,
    pub diverge_threshold: f64,

    pub add_layers: Vec<usize>,
    pub add_activation: Activation,
    pub add_epochs: usize,
    pub add_batch_size: usize,
    pub add_train_size: usize,
    pub add_test_size: usize,
    pub add_self_steps: usize,
    /// Per-sample absolute error bound of the goal check.
    pub goal_zeta: f64,

    pub mnist_layers: Vec<usize>,
    pub mnist_activation: Activation,
    pub mnist_epochs: usize,
    pub mnist_batch_size: usize,
    /// Task batches per self-training step; with `mnist_ratio_inverse`,
    /// self-training steps per task batch instead.
    pub mnist_ratio: usize,
    pub mnist_ratio_inverse: bool,
    pub mnist_loss: Loss,
    pub input_noise: f64,
    /// Use only the first N samples of a split (0 keeps all).
    pub mnist_train_limit: usize,
    pub mnist_test_limit: usize,
    pub record_trajectories: bool,
    pub pca_components: usize,

    pub robustness_sigmas: Vec<f64>,
    pub robustness_max_steps: usize,

    pub mnist_url: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_seeds: 1,
            deterministic: false,
            threads: 0,
            out_dir: PathBuf::from("runs"),
            data_dir: std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data/mnist")),
            checkpoint: None,
            particle_layers: vec![5, 3, 3, 1],
            learning_rate: 0.004,
            momentum: 0.9,
            epsilon: 1e-5,
            zero_threshold: 1e-6,
            diverge_threshold: 1e3,
            add_layers: vec![2, 3, 3, 1],
            add_activation: Activation::Linear,
            add_epochs: 60,
            add_batch_size: 50,
            add_train_size: 1000,
            add_test_size: 200,
            add_self_steps: 25,
            goal_zeta: 1e-2,
            mnist_layers: vec![225, 5, 5, 5, 10],
            mnist_activation: Activation::Gelu,
            mnist_epochs: 200,
            mnist_batch_size: 16,
            mnist_ratio: 5,
            mnist_ratio_inverse: false,
            mnist_loss: Loss::CrossEntropy,
            input_noise: 1e-4,
            mnist_train_limit: 0,
            mnist_test_limit: 0,
            record_trajectories: true,
            pca_components: 3,
            robustness_sigmas: (0..10).map(|i| 10f64.powi(i - 9)).collect(),
            robustness_max_steps: 100,
            mnist_url: "https://storage.googleapis.com/cvdf-datasets/mnist/".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.n_seeds == 0 {
            return bad("n_seeds must be at least 1");
        }
        if !(self.epsilon > 0.0 && self.zero_threshold > 0.0 && self.diverge_threshold > 0.0) {
            return bad("epsilon and thresholds must be positive");
        }
        if !(self.goal_zeta > 0.0) {
            return bad("goal_zeta must be positive");
        }
        if self.add_batch_size == 0 || self.mnist_batch_size == 0 || self.add_self_steps == 0 || self.mnist_ratio == 0 {
            return bad("batch sizes, self steps and ratio must be at least 1");
        }
        if self.add_train_size == 0 || self.add_test_size == 0 {
            return bad("addition dataset sizes must be at least 1");
        }
        if !(self.input_noise >= 0.0) || self.robustness_sigmas.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative");
        }
        if self.robustness_max_steps == 0 {
            return bad("robustness_max_steps must be at least 1");
        }
        crate::net::OptimizerState::new(self.learning_rate, self.momentum, 0).map_err(|e| Error::Config(e.to_string()))?;
        self.particle_arch()?;
        self.addition_arch()?;
        self.mnist_arch()?;
        Ok(())
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |i| self.seed.wrapping_add(i))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    pub fn thresholds(&self) -> Result<Thresholds> {
        Ok(Thresholds {
            margin: FixpointMargin::new(self.epsilon)?,
            zero: self.zero_threshold,
            diverge: self.diverge_threshold,
        })
    }

    pub fn particle_arch(&self) -> Result<NetworkArchitecture> {
        NetworkArchitecture::new(self.particle_layers.clone(), Activation::Linear).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn addition_arch(&self) -> Result<OrganismArchitecture> {
        OrganismArchitecture::new(self.add_layers.clone(), self.add_activation, self.particle_arch()?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn mnist_arch(&self) -> Result<OrganismArchitecture> {
        OrganismArchitecture::new(self.mnist_layers.clone(), self.mnist_activation, self.particle_arch()?)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn addition_schedule(&self) -> TrainingSchedule {
        TrainingSchedule {
            mode: ScheduleMode::PerBatchSelfTrain,
            self_steps_per_particle: self.add_self_steps,
            task_batches_per_self_round: 1,
            epochs: self.add_epochs,
            batch_size: self.add_batch_size,
        }
    }

    pub fn mnist_schedule(&self) -> TrainingSchedule {
        let (mode, steps, batches) = if self.mnist_ratio_inverse {
            (ScheduleMode::PerBatchSelfTrain, self.mnist_ratio, 1)
        } else {
            (ScheduleMode::RatioTaskToSelf, 1, self.mnist_ratio)
        };
        TrainingSchedule {
            mode,
            self_steps_per_particle: steps,
            task_batches_per_self_round: batches,
            epochs: self.mnist_epochs,
            batch_size: self.mnist_batch_size,
        }
    }
}

/// Independent random streams derived from one root seed. Each named stream
/// is a separate ChaCha stream of the same key, so drawing more from one
/// never shifts another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStreams {
    pub root: u64,
}

impl SeedStreams {
    pub const INIT: &'static str = "init";
    pub const DATA: &'static str = "data";
    pub const BATCHING: &'static str = "batching";
    pub const NOISE: &'static str = "noise";
    pub const PERTURBATION: &'static str = "perturbation";

    pub fn new(root: u64) -> Self {
        SeedStreams { root }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml_str(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.robustness_sigmas.len(), 10);
        assert!((cfg.robustness_sigmas[0] - 1e-9).abs() < 1e-24);
        assert_eq!(cfg.robustness_sigmas[9], 1.0);
    }

    #[test]
    fn file_values_override_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\nadd_epochs = 5\nmnist_activation = \"linear\"\n").unwrap();
        assert_eq!((cfg.seed, cfg.add_epochs, cfg.mnist_activation), (7, 5, Activation::Linear));
        assert_eq!(cfg.learning_rate, 0.004);
    }

    #[test]
    fn table_input_matches_text_input() {
        let text = "seed = 9\nrobustness_sigmas = [0.0, 0.1]\n";
        let table: toml::Table = text.parse().unwrap();
        assert_eq!(RunConfig::from_table(table).unwrap(), RunConfig::from_toml_str(text).unwrap());
        let bad: toml::Table = "nope = 1".parse().unwrap();
        assert!(RunConfig::from_table(bad).is_err());
    }

    #[test]
    fn unknown_and_invalid_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml_str("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("epsilon = -1.0").is_err());
        assert!(RunConfig::from_toml_str("momentum = 1.0").is_err());
        assert!(RunConfig::from_toml_str("particle_layers = [4, 1]").is_err());
        assert!(RunConfig::from_toml_str("seed = \"x\"").is_err());
    }

    #[test]
    fn inverse_ratio_swaps_schedule_direction() {
        let mut cfg = RunConfig::default();
        let s = cfg.mnist_schedule();
        assert_eq!((s.mode, s.self_steps_per_particle, s.task_batches_per_self_round), (ScheduleMode::RatioTaskToSelf, 1, 5));
        cfg.mnist_ratio_inverse = true;
        let s = cfg.mnist_schedule();
        assert_eq!((s.mode, s.self_steps_per_particle, s.task_batches_per_self_round), (ScheduleMode::PerBatchSelfTrain, 5, 1));
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let s = SeedStreams::new(3);
        let a: u64 = s.stream(SeedStreams::INIT).random();
        let b: u64 = s.stream(SeedStreams::BATCHING).random();
        assert_ne!(a, b);
        assert_eq!(a, SeedStreams::new(3).stream(SeedStreams::INIT).random::<u64>());
        assert_ne!(a, SeedStreams::new(4).stream(SeedStreams::INIT).random::<u64>());
    }
}
