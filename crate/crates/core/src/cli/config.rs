//! Experiment configuration: one JSON document driving every pipeline
//! stage. Validation reports the precise field path of the first
//! offending value.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::LstmHyperparams;
use crate::network::{hanoi_builtin, parse_inp, validate_network, NetworkModel, ParseError};
use crate::sampling::NoiseMode;
use crate::scenario::GenConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config at {field}: {message}")]
    InvalidConfig { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("network file failed to parse: {0}")]
    Network(#[from] ParseError),
    #[error("network fails validation: {findings:?}")]
    NetworkInvalid { findings: Vec<crate::network::Finding> },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::InvalidConfig {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkSource {
    /// Built-in fixture name; currently `hanoi`.
    Builtin(String),
    /// Path to an INP file, relative to the config file's directory.
    InpPath(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSource,
    pub generator: GenConfig,
    pub hyper: LstmHyperparams,
    /// Conformal miscoverage level.
    pub alpha: f64,
    /// Scenario split fractions (train, calibration, test).
    #[serde(default = "default_split")]
    pub split_fractions: (f64, f64, f64),
    /// Sampling budgets as fractions of the junction count.
    pub budgets: Vec<f64>,
    /// Policy names: adaptive, uniform_random, static_high_variance,
    /// round_robin, full.
    pub policies: Vec<String>,
    /// Sensor noise levels for the robustness experiment.
    pub sensor_sigmas: Vec<f64>,
    #[serde(default = "default_noise_mode")]
    pub noise_mode: NoiseMode,
    /// Pipeline seeds; every stage is deterministic per seed.
    pub seeds: Vec<u64>,
    /// Budget fraction used by the ablation table.
    #[serde(default = "default_ablation_budget")]
    pub ablation_budget: f64,
    /// Keep per-node residual archives in calibration tables (needed by
    /// the sensitivity sweep).
    #[serde(default = "default_true")]
    pub keep_residual_archive: bool,
}

fn default_split() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

fn default_noise_mode() -> NoiseMode {
    NoiseMode::Additive
}

fn default_ablation_budget() -> f64 {
    0.4
}

fn default_true() -> bool {
    true
}

pub const KNOWN_POLICIES: [&str; 5] = [
    "adaptive",
    "uniform_random",
    "static_high_variance",
    "round_robin",
    "full",
];

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha", format!("{} not in (0, 1)", self.alpha)));
        }
        if self.budgets.is_empty() {
            return Err(invalid("budgets", "at least one budget required"));
        }
        for (i, b) in self.budgets.iter().enumerate() {
            if !(*b > 0.0 && *b <= 1.0) {
                return Err(invalid(
                    &format!("budgets[{i}]"),
                    format!("{b} not in (0, 1]"),
                ));
            }
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed required"));
        }
        if self.policies.is_empty() {
            return Err(invalid("policies", "at least one policy required"));
        }
        for (i, p) in self.policies.iter().enumerate() {
            if !KNOWN_POLICIES.contains(&p.as_str()) {
                return Err(invalid(
                    &format!("policies[{i}]"),
                    format!("unknown policy {p:?}, expected one of {KNOWN_POLICIES:?}"),
                ));
            }
        }
        for (i, s) in self.sensor_sigmas.iter().enumerate() {
            if *s < 0.0 {
                return Err(invalid(&format!("sensor_sigmas[{i}]"), "must be >= 0"));
            }
        }
        let (a, b, c) = self.split_fractions;
        if a <= 0.0 || b <= 0.0 || c <= 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(invalid(
                "split_fractions",
                "must be positive and sum to 1",
            ));
        }
        if !(self.ablation_budget > 0.0 && self.ablation_budget <= 1.0) {
            return Err(invalid("ablation_budget", "not in (0, 1]"));
        }
        Ok(())
    }

    /// Loads and validates the configured network. INP paths resolve
    /// relative to `base_dir`.
    pub fn load_network(&self, base_dir: &Path) -> Result<NetworkModel, ConfigError> {
        let net = match &self.network {
            NetworkSource::Builtin(name) => match name.as_str() {
                "hanoi" => hanoi_builtin(),
                other => {
                    return Err(invalid(
                        "network.builtin",
                        format!("unknown builtin {other:?}, expected \"hanoi\""),
                    ));
                }
            },
            NetworkSource::InpPath(rel) => {
                let path = base_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                parse_inp(&text)?.network
            }
        };
        let report = validate_network(&net);
        if !report.is_empty() {
            return Err(ConfigError::NetworkInvalid {
                findings: report.findings,
            });
        }
        Ok(net)
    }

    /// Junction budget for a fraction of the junction count (at least 1).
    pub fn budget_nodes(&self, fraction: f64, junctions: usize) -> usize {
        ((fraction * junctions as f64).round() as usize).clamp(1, junctions)
    }

    /// Desk-scale defaults used by documentation examples and tests.
    pub fn desk_default(seed: u64) -> Self {
        ExperimentConfig {
            network: NetworkSource::Builtin("hanoi".into()),
            generator: GenConfig {
                n_scenarios: 10,
                horizon_hours: 360,
                seed: 0,
                diurnal_amplitude: 0.12,
                weekly_amplitude: 0.05,
                noise_cv: 0.08,
                commercial_fraction: 0.4,
            },
            hyper: LstmHyperparams::default(),
            alpha: 0.1,
            split_fractions: default_split(),
            budgets: vec![0.2, 0.4, 0.6, 0.8],
            policies: KNOWN_POLICIES.iter().map(|s| s.to_string()).collect(),
            sensor_sigmas: vec![0.0, 0.1],
            noise_mode: NoiseMode::Additive,
            seeds: vec![seed],
            ablation_budget: 0.4,
            keep_residual_archive: true,
        }
    }
}
