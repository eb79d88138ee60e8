//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sparsenn_core::model::fx::InferenceMode;
use sparsenn_core::train::{DeltaPath, HyperParams, L1Target, PredictorMode};
use sparsenn_core::NetworkSpec;
use sparsenn_sim::{ArchConfig, EnergyConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub energy: EnergyConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Generated clusters; train and test share one generator call.
    Synthetic {
        train: usize,
        test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_prototypes")]
        prototypes: usize,
        #[serde(default = "default_background")]
        background: f64,
    },
    /// IDX files (MNIST layout); pixels scaled to [0, 1].
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    /// Whitespace-separated `.amat` files, label in the last column.
    Amat {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

fn default_noise() -> f64 {
    0.9
}

fn default_prototypes() -> usize {
    5
}

fn default_background() -> f64 {
    0.6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layer_sizes: Vec<usize>,
    pub rank: usize,
    /// Layers carrying a predictor; every hidden layer when absent.
    #[serde(default)]
    pub predictor_layers: Option<Vec<usize>>,
}

impl NetworkConfig {
    pub fn spec(&self) -> Result<NetworkSpec, ConfigError> {
        let spec = match &self.predictor_layers {
            Some(layers) => NetworkSpec::new(self.layer_sizes.clone(), self.rank, layers.iter().copied()),
            None => NetworkSpec::with_hidden_predictors(self.layer_sizes.clone(), self.rank),
        };
        spec.map_err(|e| ConfigError::Invalid(format!("network: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l1_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub predictor_mode: PredictorMode,
    pub l1_target: L1Target,
    pub delta_path: DeltaPath,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        TrainConfig {
            learning_rate: h.learning_rate,
            l1_lambda: h.l1_lambda,
            epochs: h.epochs,
            batch_size: h.batch_size,
            predictor_mode: h.predictor_mode,
            l1_target: h.l1_target,
            delta_path: h.delta_path,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self, seed: u64) -> HyperParams {
        HyperParams {
            learning_rate: self.learning_rate,
            l1_lambda: self.l1_lambda,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            predictor_mode: self.predictor_mode,
            l1_target: self.l1_target,
            delta_path: self.delta_path,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Test inputs simulated per mode.
    pub samples: usize,
    /// Training inputs used to calibrate activation formats.
    pub calibration: usize,
    pub modes: Vec<InferenceMode>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { samples: 20, calibration: 200, modes: vec![InferenceMode::UvOn, InferenceMode::UvOff] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub modes: Vec<PredictorMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { ranks: vec![1, 2, 4, 8, 16], modes: vec![PredictorMode::EndToEnd, PredictorMode::SvdStatic] }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; returns the raw text for hashing as well.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Ok((Self::from_toml(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let spec = self.network.spec()?;
        for &l in &spec.predictor_layers {
            let (m, n) = spec.layer_shape(l);
            if spec.rank >= m.min(n) {
                return bad(format!("rank {} must be below min({m}, {n}) for predicted layer {l}", spec.rank));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic { train, test, noise, prototypes, background } => {
                if *train == 0 || *test == 0 {
                    return bad("synthetic dataset needs train > 0 and test > 0".into());
                }
                if !(noise.is_finite() && *noise >= 0.0) || *prototypes == 0 || !(0.0..=1.0).contains(background) {
                    return bad("synthetic dataset needs noise >= 0, prototypes >= 1, background in [0, 1]".into());
                }
            }
            DatasetConfig::Idx { train_limit, test_limit, .. } | DatasetConfig::Amat { train_limit, test_limit, .. } => {
                if *train_limit == Some(0) || *test_limit == Some(0) {
                    return bad("dataset limits must be positive".into());
                }
            }
        }
        self.train.hyper(self.seed).validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        self.arch.validate().map_err(|e| ConfigError::Invalid(format!("arch: {e}")))?;
        self.energy.validate().map_err(|e| ConfigError::Invalid(format!("energy: {e}")))?;
        if self.simulate.samples == 0 || self.simulate.calibration == 0 {
            return bad("simulate.samples and simulate.calibration must be positive".into());
        }
        if self.simulate.modes.is_empty() {
            return bad("simulate.modes must not be empty".into());
        }
        if self.sweep.ranks.is_empty() || self.sweep.modes.is_empty() {
            return bad("sweep.ranks and sweep.modes must not be empty".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [dataset]
        kind = "synthetic"
        train = 100
        test = 50

        [network]
        layer_sizes = [784, 100, 10]
        rank = 8
    "#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.arch.num_pes, 64);
        assert_eq!(cfg.train.predictor_mode, PredictorMode::EndToEnd);
        assert_eq!(cfg.simulate.modes.len(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        for extra in ["bogus = 1\n", "[arch]\nnum_pe = 4\n", "[train]\nlr = 0.1\n"] {
            let text = format!("{extra}{MINIMAL}");
            let text = if extra.starts_with('[') { format!("{MINIMAL}{extra}") } else { text };
            assert!(ExperimentConfig::from_toml(&text).is_err(), "accepted {extra:?}");
        }
        let text = MINIMAL.replace("test = 50", "test = 50\nextra = 3");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn shipped_config_parses() {
        let text = include_str!("../../../configs/basic.toml");
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.network.layer_sizes, vec![784, 100, 10]);
        assert_eq!(cfg.energy, EnergyConfig::default());
    }

    #[test]
    fn invalid_values_rejected() {
        let text = MINIMAL.replace("rank = 8", "rank = 100");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Invalid(_))));
        let text = format!("{MINIMAL}[arch]\nnum_pes = 32\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(ConfigError::Invalid(_))));
        let text = MINIMAL.replace("train = 100", "train = 0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
