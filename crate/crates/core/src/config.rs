//! Experiment configuration shared by every pipeline stage, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{ControllerNodeConfig, CycleClock, PlantNodeConfig};
use crate::nn::NetworkSpec;
use crate::plant::{ActuatorBounds, PlantParams};
use crate::sim::{ClosedLoopConfig, ControllerConfig};
use crate::trainer::TrainConfig;

pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkWidths {
    /// Hidden widths of the input stack; the last feeds the LSTM.
    pub input: Vec<usize>,
    /// Hidden widths of the output stack before the linear readout.
    pub output: Vec<usize>,
}

impl Default for NetworkWidths {
    fn default() -> Self {
        Self {
            input: vec![24, 24, 16],
            output: vec![24, 24],
        }
    }
}

impl NetworkWidths {
    pub fn spec(&self) -> NetworkSpec {
        NetworkSpec::from_widths(&self.input, &self.output)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cycles: usize,
    pub train_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            cycles: 20_000,
            train_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub plant: String,
    pub controller: String,
}

impl Default for Endpoints {
    fn default() -> Self {
        Self {
            plant: "127.0.0.1:47101".into(),
            controller: "127.0.0.1:47102".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub endpoints: Endpoints,
    pub drop_probability: f64,
    pub heartbeat_ms: f64,
    pub idle_exit_ms: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            endpoints: Endpoints::default(),
            drop_probability: 0.0,
            heartbeat_ms: 80.0,
            idle_exit_ms: 3000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Step profile CSV; the built-in 650-cycle profile when absent.
    pub profile: Option<PathBuf>,
    pub cycles: Option<usize>,
    pub warmup: usize,
    pub initial_actuation: crate::plant::Actuation,
    pub envelope_factor: f64,
    /// Cycles the plant settles at the initial actuation before the run.
    pub settle_cycles: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cl = ClosedLoopConfig::default();
        Self {
            profile: None,
            cycles: None,
            warmup: cl.warmup,
            initial_actuation: cl.initial_actuation,
            envelope_factor: cl.envelope_factor,
            settle_cycles: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: PlantParams,
    /// Excitation range for dataset generation.
    pub actuators: ActuatorBounds,
    pub network: NetworkWidths,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub controller: ControllerConfig,
    pub run: RunConfig,
    pub clock: CycleClock,
    pub bridge: BridgeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            plant: PlantParams::default(),
            actuators: ActuatorBounds::default(),
            network: NetworkWidths::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            controller: ControllerConfig::default(),
            run: RunConfig::default(),
            clock: CycleClock::default(),
            bridge: BridgeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes `config.toml` into `dir`, creating it if needed.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf, ConfigError> {
        let dir = dir.as_ref();
        let path = dir.join(SNAPSHOT_NAME);
        let io = |source| ConfigError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(&path, self.to_toml()).map_err(io)?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.plant.validate().map_err(|e| invalid(e.to_string()))?;
        self.network.spec().validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.controller.weights.validate().map_err(|e| invalid(e.to_string()))?;
        self.controller.bounds.validate().map_err(|e| invalid(e.to_string()))?;
        self.controller.solver.validate().map_err(invalid)?;
        self.clock.validate().map_err(invalid)?;
        if self.controller.horizon == 0 {
            return Err(invalid("horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.data.train_fraction) || self.data.train_fraction == 0.0 {
            return Err(invalid("train_fraction must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bridge.drop_probability) {
            return Err(invalid("drop_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn closed_loop(&self) -> ClosedLoopConfig {
        ClosedLoopConfig {
            controller: self.controller.clone(),
            initial_actuation: self.run.initial_actuation,
            warmup: self.run.warmup,
            envelope_factor: self.run.envelope_factor,
            budget_ms: self.clock.budget_ms,
        }
    }

    pub fn plant_node(&self) -> PlantNodeConfig {
        PlantNodeConfig {
            clock: self.clock,
            initial_actuation: self.run.initial_actuation,
            bounds: self.controller.bounds.input,
            drop_probability: self.bridge.drop_probability,
            loss_seed: self.seed,
        }
    }

    pub fn controller_node(&self) -> ControllerNodeConfig {
        ControllerNodeConfig {
            initial_actuation: self.run.initial_actuation,
            heartbeat_ms: self.bridge.heartbeat_ms,
            idle_exit_ms: self.bridge.idle_exit_ms,
            stop_after: None,
        }
    }
}
