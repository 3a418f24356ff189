use std::fs;
use std::path::{Path, PathBuf};

use podinn::integrators::IntegratorConfig;
use podinn::models::ModelOptions;
use podinn::systems::{CoordinateMode, SystemId, SystemSpec};
use podinn::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Podinn,
    NeuralOde,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_traj: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub test_traj: usize,
    pub test_steps: usize,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { n_traj: 100, n_steps: 200, seed: 0, test_traj: 5, test_steps: 2_000, test_seed: 1 }
    }
}

/// Everything an experiment run depends on; flags override file values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: String,
    pub mode: Option<CoordinateMode>,
    pub model: ModelKind,
    pub model_options: ModelOptions,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub integrator: IntegratorConfig,
    /// VPT threshold; the system's own when unset.
    pub theta: Option<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            system: "b".into(),
            mode: None,
            model: ModelKind::Podinn,
            model_options: ModelOptions::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            integrator: IntegratorConfig::default(),
            theta: None,
            seeds: vec![0],
            out: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(ExperimentConfig::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// System specification after applying the coordinate mode.
    pub fn spec(&self) -> Result<SystemSpec, CliError> {
        let spec = SystemSpec::by_name(&self.system).map_err(|e| CliError::Usage(e.to_string()))?;
        match (self.mode, spec.id) {
            (None, _) => Ok(spec),
            (Some(m), _) if m == spec.mode => Ok(spec),
            (Some(CoordinateMode::Absolute), SystemId::A) => Ok(SystemSpec::new(SystemId::AAbs)),
            (Some(CoordinateMode::Absolute), SystemId::B) => Ok(SystemSpec::new(SystemId::BAbs)),
            (Some(CoordinateMode::Relative), SystemId::AAbs) => Ok(SystemSpec::new(SystemId::A)),
            (Some(CoordinateMode::Relative), SystemId::BAbs) => Ok(SystemSpec::new(SystemId::B)),
            (Some(m), _) => Err(CliError::Usage(format!("system `{}` has no {m:?} coordinate mode", self.system))),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.spec()?;
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds must not be empty".into()));
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.integrator.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.theta.is_some_and(|t| !(t > 0.0)) {
            return Err(CliError::Usage("theta must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective configuration,
    /// leaving out the output location.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&ExperimentConfig { out: PathBuf::new(), ..self.clone() }).expect("configuration serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
