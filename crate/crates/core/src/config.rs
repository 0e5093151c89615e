//! Scenario configuration files (JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::{AllocationWeights, ContactWrenchBounds};
use crate::control::ControllerGains;
use crate::error::{Error, Result};
use crate::gait::GaitParams;
use crate::interference::InterferenceParams;
use crate::model::RobotModel;
use crate::sim::{FlightScenario, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flight,
    Crawl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Robot description file; when absent `robot` is used.
    pub robot_file: Option<PathBuf>,
    pub robot: RobotModel,
    pub mode: Mode,
    pub gains: ControllerGains,
    pub weights: AllocationWeights,
    pub interference: InterferenceParams,
    /// Impose the interference constraints during flight.
    pub use_interference: bool,
    pub gait: GaitParams,
    pub cycles: usize,
    pub contact_bounds: Option<ContactWrenchBounds>,
    pub sim: SimConfig,
    pub flight: FlightScenario,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            robot_file: None,
            robot: RobotModel::default(),
            mode: Mode::Flight,
            gains: ControllerGains::default(),
            weights: AllocationWeights::default(),
            interference: InterferenceParams::default(),
            use_interference: true,
            gait: GaitParams::default(),
            cycles: 3,
            contact_bounds: None,
            sim: SimConfig::default(),
            flight: FlightScenario::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn crawl() -> Self {
        Self { mode: Mode::Crawl, ..Default::default() }
    }

    /// Parse and validate; field errors carry the offending name.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("{e} (line {}, column {})", e.line(), e.column())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // Relative robot files resolve against the config's directory.
        if let (Some(rf), Some(dir)) = (cfg.robot_file.as_mut(), path.parent()) {
            if rf.is_relative() {
                *rf = dir.join(&*rf);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(rf) = &self.robot_file {
            if !rf.exists() {
                return Err(Error::invalid("robot_file", format!("{} does not exist", rf.display())));
            }
        } else {
            self.robot.validate()?;
        }
        self.gains.validate()?;
        self.weights.validate()?;
        self.interference.validate()?;
        self.gait.validate()?;
        if let Some(b) = &self.contact_bounds {
            b.validate()?;
        }
        self.sim.validate()?;
        self.flight.validate()?;
        Ok(())
    }

    pub fn load_model(&self) -> Result<RobotModel> {
        match &self.robot_file {
            Some(path) => RobotModel::from_file(path),
            None => Ok(self.robot.clone()),
        }
    }
}
