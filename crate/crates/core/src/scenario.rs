//! Synthetic multi-scenario demand generation and measurement-noise
//! injection.
//!
//! Demands follow `q_t = base * D_class(t mod 24) * W(t mod 168) *
//! max(0, 1 + cv * eta)` with eta standard normal from a stream keyed by
//! (seed, scenario, node). The diurnal and weekly shapes are fixed tables
//! shipped as constants so tests are exact; residential demand peaks at
//! hours 7 and 19, commercial at hour 13.

use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::NetworkModel;
use crate::seeding::{stream_rng, tags};

/// Zero-mean residential diurnal shape, max magnitude 1 (peak hour 7,
/// secondary peak hour 19, night trough).
pub const DIURNAL_RESIDENTIAL: [f64; 24] = [
    -0.85, -0.95, -1.00, -0.95, -0.70, -0.20, 0.55, 1.00, 0.65, 0.25, 0.05, 0.00, 0.05, -0.05,
    -0.15, -0.10, 0.10, 0.40, 0.75, 0.95, 0.70, 0.30, -0.20, -0.60,
];

/// Zero-mean commercial diurnal shape: a flatter business-hours hump with
/// a smaller envelope than the residential curve, peaking at hour 13.
pub const DIURNAL_COMMERCIAL: [f64; 24] = [
    -0.35, -0.37, -0.38, -0.38, -0.35, -0.26, -0.10, 0.06, 0.22, 0.32, 0.37, 0.40, 0.42, 0.45,
    0.40, 0.32, 0.22, 0.13, 0.03, -0.06, -0.16, -0.24, -0.29, -0.33,
];

/// Zero-mean weekly shape over 168 hours: weekdays slightly high, weekend
/// slightly low, smooth day-scale ramps.
pub fn weekly_shape() -> [f64; 168] {
    let day_level = [0.35, 0.55, 0.60, 0.55, 0.45, -1.00, -0.85];
    let mut shape = [0.0; 168];
    for (h, slot) in shape.iter_mut().enumerate() {
        let day = h / 24;
        let next = (day + 1) % 7;
        let frac = (h % 24) as f64 / 24.0;
        // Cosine ramp between consecutive day levels keeps the table smooth.
        let w = (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0;
        *slot = day_level[day] * (1.0 - w) + day_level[next] * w;
    }
    shape
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    Residential,
    Commercial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitLabel {
    Train,
    Calibration,
    Test,
}

/// One scenario of true nodal demands, `steps x junctions`, L/s, hourly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandScenario {
    pub scenario_id: usize,
    pub steps: usize,
    pub junctions: usize,
    /// Row-major by timestep.
    data: Vec<f64>,
}

impl DemandScenario {
    pub fn from_rows(scenario_id: usize, rows: Vec<Vec<f64>>) -> Self {
        let steps = rows.len();
        let junctions = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(steps * junctions);
        for row in rows {
            assert_eq!(row.len(), junctions, "ragged demand rows");
            data.extend(row);
        }
        DemandScenario {
            scenario_id,
            steps,
            junctions,
            data,
        }
    }

    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.data[t * self.junctions + node]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.junctions..(t + 1) * self.junctions]
    }

    /// Demand history of one junction over all timesteps.
    pub fn node_series(&self, node: usize) -> Vec<f64> {
        (0..self.steps).map(|t| self.get(t, node)).collect()
    }

    pub fn set(&mut self, t: usize, node: usize, value: f64) {
        self.data[t * self.junctions + node] = value;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub scenarios: Vec<DemandScenario>,
    /// Per-scenario split label, parallel to `scenarios`.
    pub split: Vec<SplitLabel>,
    /// Per-junction class assignment used by the generator.
    pub node_classes: Vec<NodeClass>,
}

impl ScenarioSet {
    pub fn of_split(&self, label: SplitLabel) -> Vec<&DemandScenario> {
        self.scenarios
            .iter()
            .zip(&self.split)
            .filter(|(_, s)| **s == label)
            .map(|(sc, _)| sc)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_scenarios: usize,
    pub horizon_hours: usize,
    pub seed: u64,
    /// Scale of the diurnal shape, in [0, 1).
    pub diurnal_amplitude: f64,
    /// Scale of the weekly shape, in [0, 1).
    pub weekly_amplitude: f64,
    /// Coefficient of variation of the multiplicative demand noise.
    pub noise_cv: f64,
    /// Fraction of junctions assigned the commercial class.
    pub commercial_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_scenarios: 20,
            horizon_hours: 2160,
            seed: 0,
            diurnal_amplitude: 0.15,
            weekly_amplitude: 0.05,
            noise_cv: 0.08,
            commercial_fraction: 0.4,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScenarioError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("{available} scenarios cannot fill all of train/calibration/test")]
    TooFewScenarios { available: usize },
}

fn check_config(cfg: &GenConfig) -> Result<(), ScenarioError> {
    let bad = |msg: &str| Err(ScenarioError::InvalidConfig(msg.into()));
    if cfg.n_scenarios == 0 {
        return bad("n_scenarios must be >= 1");
    }
    if cfg.horizon_hours == 0 {
        return bad("horizon_hours must be >= 1");
    }
    if !(0.0..1.0).contains(&cfg.diurnal_amplitude) {
        return bad("diurnal_amplitude must be in [0, 1)");
    }
    if !(0.0..1.0).contains(&cfg.weekly_amplitude) {
        return bad("weekly_amplitude must be in [0, 1)");
    }
    if cfg.diurnal_amplitude + cfg.weekly_amplitude >= 1.0 {
        return bad("diurnal + weekly amplitude must stay below 1 to keep demands non-negative");
    }
    if cfg.noise_cv < 0.0 {
        return bad("noise_cv must be >= 0");
    }
    if !(0.0..=1.0).contains(&cfg.commercial_fraction) {
        return bad("commercial_fraction must be in [0, 1]");
    }
    Ok(())
}

/// Deterministic class assignment: the `commercial_fraction` share of
/// junctions is drawn by a seeded shuffle of node positions.
pub fn assign_classes(n_junctions: usize, cfg: &GenConfig) -> Vec<NodeClass> {
    let n_commercial = (cfg.commercial_fraction * n_junctions as f64).round() as usize;
    let mut order: Vec<usize> = (0..n_junctions).collect();
    let mut rng = stream_rng(cfg.seed, &[tags::NODE_CLASS]);
    // Fisher-Yates from the seeded stream.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut classes = vec![NodeClass::Residential; n_junctions];
    for &pos in order.iter().take(n_commercial) {
        classes[pos] = NodeClass::Commercial;
    }
    classes
}

/// Diurnal multiplier for a class at an hour-of-day under the configured
/// amplitude.
pub fn diurnal_multiplier(class: NodeClass, hour_of_day: usize, amplitude: f64) -> f64 {
    let shape = match class {
        NodeClass::Residential => DIURNAL_RESIDENTIAL[hour_of_day % 24],
        NodeClass::Commercial => DIURNAL_COMMERCIAL[hour_of_day % 24],
    };
    1.0 + amplitude * shape
}

/// Generates the full scenario set for a network's junctions. The split
/// is left unassigned (all `Train`) until [`split_scenarios`] runs.
pub fn generate_scenarios(net: &NetworkModel, cfg: &GenConfig) -> Result<ScenarioSet, ScenarioError> {
    check_config(cfg)?;
    let bases = net.base_demands();
    let classes = assign_classes(bases.len(), cfg);
    let weekly = weekly_shape();

    let scenarios: Vec<DemandScenario> = (0..cfg.n_scenarios)
        .map(|scenario_id| {
            let mut data = vec![0.0; cfg.horizon_hours * bases.len()];
            for (node, &base) in bases.iter().enumerate() {
                let mut rng =
                    stream_rng(cfg.seed, &[tags::SCENARIO_NOISE, scenario_id as u64, node as u64]);
                for t in 0..cfg.horizon_hours {
                    let diurnal = diurnal_multiplier(classes[node], t % 24, cfg.diurnal_amplitude);
                    let week = 1.0 + cfg.weekly_amplitude * weekly[t % 168];
                    let eta: f64 = rng.sample(StandardNormal);
                    let noise = (1.0 + cfg.noise_cv * eta).max(0.0);
                    data[t * bases.len() + node] = base * diurnal * week * noise;
                }
            }
            DemandScenario {
                scenario_id,
                steps: cfg.horizon_hours,
                junctions: bases.len(),
                data,
            }
        })
        .collect();

    Ok(ScenarioSet {
        split: vec![SplitLabel::Train; scenarios.len()],
        scenarios,
        node_classes: classes,
    })
}

/// Deterministic split by scenario id order: the first `train` share, then
/// calibration, then test. Fractions must sum to 1; every split must end
/// up non-empty.
pub fn split_scenarios(
    mut set: ScenarioSet,
    fractions: (f64, f64, f64),
) -> Result<ScenarioSet, ScenarioError> {
    let (ftrain, fcal, ftest) = fractions;
    if ftrain <= 0.0 || fcal <= 0.0 || ftest <= 0.0 || (ftrain + fcal + ftest - 1.0).abs() > 1e-9 {
        return Err(ScenarioError::InvalidConfig(
            "split fractions must be positive and sum to 1".into(),
        ));
    }
    let n = set.scenarios.len();
    // Largest-remainder apportionment, then enforce one scenario per split.
    let targets = [ftrain * n as f64, fcal * n as f64, ftest * n as f64];
    let mut counts = [0usize; 3];
    let mut remainders = [0.0f64; 3];
    for i in 0..3 {
        counts[i] = targets[i].floor() as usize;
        remainders[i] = targets[i] - targets[i].floor();
    }
    let mut leftover = n - counts.iter().sum::<usize>();
    while leftover > 0 {
        let (best, _) = remainders
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        counts[best] += 1;
        remainders[best] = -1.0;
        leftover -= 1;
    }
    while counts.iter().any(|&c| c == 0) {
        let empty = counts.iter().position(|&c| c == 0).unwrap();
        let (largest, &max) = counts.iter().enumerate().max_by_key(|&(_, &c)| c).unwrap();
        if max <= 1 {
            return Err(ScenarioError::TooFewScenarios { available: n });
        }
        counts[largest] -= 1;
        counts[empty] += 1;
    }
    let (n_train, n_cal) = (counts[0], counts[1]);
    for (i, label) in set.split.iter_mut().enumerate() {
        *label = if i < n_train {
            SplitLabel::Train
        } else if i < n_train + n_cal {
            SplitLabel::Calibration
        } else {
            SplitLabel::Test
        };
    }
    Ok(set)
}

/// Multiplicative Gaussian perturbation of a whole series:
/// `entry' = entry * (1 + sigma * eta)` clamped at zero. `sigma = 0` is
/// the identity.
pub fn inject_noise(scenario: &DemandScenario, sigma: f64, seed: u64) -> DemandScenario {
    let mut out = scenario.clone();
    if sigma == 0.0 {
        return out;
    }
    let mut rng = stream_rng(seed, &[tags::INJECT, scenario.scenario_id as u64]);
    for v in out.data.iter_mut() {
        let eta: f64 = rng.sample(StandardNormal);
        *v = (*v * (1.0 + sigma * eta)).max(0.0);
    }
    out
}
