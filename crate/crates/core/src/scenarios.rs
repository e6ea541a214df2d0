//! Scenario files shipped with the crate, one per experiment.

use std::path::Path;

use crate::config::SimConfig;
use crate::error::{Error, Result};

macro_rules! bundled {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../scenarios/", $name, ".toml")))),*]
    };
}

pub const BUNDLED: &[(&str, &str)] = bundled!(
    "static_placement",
    "mobile_placement",
    "hop_distance",
    "access_modes",
    "scan_timeout",
    "scan_sectors",
    "bootstrap",
    "decision_ratio",
    "workload",
    "convergence_sweep",
    "demand_doubling",
    "demand_region",
);

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

/// First comment line of a scenario file.
pub fn description(text: &str) -> &str {
    text.lines()
        .find_map(|l| l.strip_prefix('#'))
        .map(str::trim)
        .unwrap_or("")
}

/// Reads `source` as a file path, falling back to a bundled scenario name.
pub fn load_text(source: &str) -> Result<String> {
    let path = Path::new(source);
    if path.exists() {
        return Ok(std::fs::read_to_string(path)?);
    }
    let stem = source.strip_suffix(".toml").unwrap_or(source);
    bundled(stem).map(str::to_string).ok_or_else(|| Error::Config {
        key: "scenario".into(),
        msg: format!("no such file or bundled scenario: {source}"),
    })
}

pub fn load(source: &str, overrides: &[(String, String)]) -> Result<SimConfig> {
    SimConfig::from_toml_str(&load_text(source)?, overrides)
}
