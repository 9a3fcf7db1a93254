//! Versioned TOML scenario files and the runner behind `scenario run`.

use std::path::Path;

use serde::Deserialize;

use crate::experiments::{
    self, DedupParams, FluctuationParams, RobustnessParams, SliceAttachParams, SpeedupParams,
};
use crate::report::ScenarioReport;
use crate::HarnessError;

pub const SCENARIO_VERSION: u32 = 1;

const BUNDLED: [(&str, &str); 6] = [
    ("dedup", include_str!("../scenarios/dedup.toml")),
    ("empty", include_str!("../scenarios/empty.toml")),
    ("fluctuation", include_str!("../scenarios/fluctuation.toml")),
    ("frontier-speedup", include_str!("../scenarios/frontier-speedup.toml")),
    ("robustness", include_str!("../scenarios/robustness.toml")),
    ("slice-attach", include_str!("../scenarios/slice-attach.toml")),
];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyParams {}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    FrontierSpeedup(SpeedupParams),
    SliceAttach(SliceAttachParams),
    Dedup(DedupParams),
    Robustness(RobustnessParams),
    Fluctuation(FluctuationParams),
    Empty(EmptyParams),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::FrontierSpeedup(_) => "frontier-speedup",
            Experiment::SliceAttach(_) => "slice-attach",
            Experiment::Dedup(_) => "dedup",
            Experiment::Robustness(_) => "robustness",
            Experiment::Fluctuation(_) => "fluctuation",
            Experiment::Empty(_) => "empty",
        }
    }

    fn validate(&self) -> Result<(), HarnessError> {
        match self {
            Experiment::FrontierSpeedup(p) => p.validate(),
            Experiment::SliceAttach(p) => p.validate(),
            Experiment::Dedup(p) => p.validate(),
            Experiment::Robustness(p) => p.validate(),
            Experiment::Fluctuation(p) => p.validate(),
            Experiment::Empty(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub experiment: Experiment,
}

impl ScenarioConfig {
    /// Parses and validates a scenario document.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let config: ScenarioConfig = toml::from_str(text).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.version != SCENARIO_VERSION {
            return Err(HarnessError::InvalidConfig(format!(
                "unsupported scenario version {}, expected {SCENARIO_VERSION}",
                self.version
            )));
        }
        if self.name.trim().is_empty() {
            return Err(HarnessError::InvalidConfig("scenario name is empty".into()));
        }
        self.experiment.validate()
    }
}

/// Names of the scenarios shipped with the harness, sorted.
pub fn bundled_scenarios() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_scenario(name: &str) -> Result<ScenarioConfig, HarnessError> {
    let text = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| HarnessError::Unknown {
            what: "scenario",
            name: name.to_string(),
        })?;
    ScenarioConfig::parse(text)
}

/// Runs `config` inside `workdir`, or a temporary directory when `None`.
/// The configuration is validated before anything is created.
pub fn run_scenario(config: &ScenarioConfig, workdir: Option<&Path>) -> Result<ScenarioReport, HarnessError> {
    config.validate()?;
    let temp;
    let dir = match workdir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d
        }
        None => {
            temp = tempfile::tempdir()?;
            temp.path()
        }
    };
    let mut report = ScenarioReport::new(&config.name, config.experiment.kind(), config.seed);
    let seed = config.seed;
    match &config.experiment {
        Experiment::FrontierSpeedup(p) => experiments::frontier_speedup(p, dir, seed, &mut report)?,
        Experiment::SliceAttach(p) => experiments::slice_attach(p, dir, seed, &mut report)?,
        Experiment::Dedup(p) => experiments::dedup(p, dir, seed, &mut report)?,
        Experiment::Robustness(p) => experiments::robustness(p, dir, seed, &mut report)?,
        Experiment::Fluctuation(p) => experiments::fluctuation(p, seed, &mut report)?,
        Experiment::Empty(_) => experiments::empty(dir, seed, &mut report)?,
    }
    Ok(report)
}
