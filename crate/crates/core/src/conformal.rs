//! Split (marginal) conformal calibration per node.
//!
//! Residuals `s = |q - q_hat|` are collected by running the full closed
//! loop over the calibration scenarios, so the calibration regime matches
//! test-time behavior (autoregressive rollout under the same sampling
//! rule). The per-node quantile at level `ceil((1-alpha)(n+1))/n` gives a
//! finite-sample conservative interval half-width, which doubles as the
//! node's uncertainty score.
//!
//! Residual collection needs a sampling policy, but the adaptive policy
//! needs quantiles, so calibration runs in two passes: pass 1 rolls out
//! under a uniform-random policy to get provisional quantiles, pass 2
//! re-rolls under the adaptive policy driven by those provisional scores
//! and produces the final table.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::PredictorBank;
use crate::network::NetworkModel;
use crate::sampling::{run_digital_twin, SamplingPolicy, TwinConfig, TwinError, UncertaintyModel};
use crate::scenario::DemandScenario;
use crate::seeding::{derive_seed, tags};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("need at least {needed} residuals for alpha = {alpha}, have {have}")]
    TooFewResiduals {
        needed: usize,
        have: usize,
        alpha: f64,
    },
    #[error("node {0} has no calibration entry")]
    UncalibratedNode(usize),
    #[error("alpha must be in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Rollout(#[from] TwinError),
}

/// Result of the finite-sample quantile: the value plus a degeneracy flag
/// set when `ceil((1-alpha)(n+1)) > n` forces the +infinity sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantile {
    pub value: f64,
    pub degenerate: bool,
}

/// Order statistic at rank `ceil((1-alpha)(n+1))` of the residuals.
///
/// Requires `n >= ceil(1/alpha) - 1`; if the corrected rank still exceeds
/// n the +infinity sentinel is returned with the degenerate flag.
pub fn conformal_quantile(residuals: &[f64], alpha: f64) -> Result<Quantile, ConformalError> {
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    let n = residuals.len();
    let needed = (1.0 / alpha).ceil() as usize - 1;
    if n < needed {
        return Err(ConformalError::TooFewResiduals {
            needed,
            have: n,
            alpha,
        });
    }
    let rank = ((1.0 - alpha) * (n as f64 + 1.0)).ceil() as usize;
    if rank > n {
        return Ok(Quantile {
            value: f64::INFINITY,
            degenerate: true,
        });
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    Ok(Quantile {
        value: sorted[rank - 1],
        degenerate: false,
    })
}

/// Symmetric conformal interval around a point forecast. The lower bound
/// may be negative; coverage accounting keeps it as-is.
pub fn prediction_interval(q_hat: f64, quantile: f64) -> (f64, f64) {
    (q_hat - quantile, q_hat + quantile)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCalibration {
    pub label: String,
    /// Conformal quantile, L/s (+infinity when degenerate).
    pub quantile: f64,
    pub n_cal: usize,
    pub degenerate: bool,
    /// Residual archive for audits and alpha sweeps; omitted unless
    /// requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<f64>>,
}

/// Per-node calibration table produced by [`calibrate_two_pass`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub alpha: f64,
    /// Sampling budget the residuals were collected under.
    pub budget: usize,
    pub entries: Vec<NodeCalibration>,
}

impl CalibrationTable {
    /// Interval half-widths in junction order, as consumed by the sampler.
    pub fn quantiles(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.quantile).collect()
    }

    /// Uncertainty score: the conformal interval width `2 * quantile`.
    pub fn uncertainty_score(&self, node: usize) -> Result<f64, ConformalError> {
        self.entries
            .get(node)
            .map(|e| 2.0 * e.quantile)
            .ok_or(ConformalError::UncalibratedNode(node))
    }

    /// Recomputes quantiles from the stored residual archives at a new
    /// miscoverage level without re-rolling the calibration scenarios.
    pub fn requantile(&self, alpha: f64) -> Result<CalibrationTable, ConformalError> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let residuals =
                    e.residuals
                        .as_ref()
                        .ok_or(ConformalError::TooFewResiduals {
                            needed: 0,
                            have: 0,
                            alpha,
                        })?;
                let q = conformal_quantile(residuals, alpha)?;
                Ok(NodeCalibration {
                    label: e.label.clone(),
                    quantile: q.value,
                    n_cal: e.n_cal,
                    degenerate: q.degenerate,
                    residuals: e.residuals.clone(),
                })
            })
            .collect::<Result<Vec<_>, ConformalError>>()?;
        Ok(CalibrationTable {
            alpha,
            budget: self.budget,
            entries,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Runs the closed loop over every calibration scenario under the given
/// policy/uncertainty pair and collects `|q - q_hat|` per node for every
/// recorded (post-warm-up) step.
pub fn collect_residuals(
    net: &NetworkModel,
    predictor: &dyn PredictorBank,
    uncertainty: &UncertaintyModel,
    policy: &SamplingPolicy,
    cal_scenarios: &[&DemandScenario],
    cfg: &TwinConfig,
) -> Result<Vec<Vec<f64>>, ConformalError> {
    let n = net.junction_count();
    let trajectories = cal_scenarios
        .par_iter()
        .map(|sc| {
            let mut run_cfg = *cfg;
            run_cfg.seed = derive_seed(cfg.seed, &[tags::CALIBRATION, sc.scenario_id as u64]);
            run_digital_twin(net, predictor, uncertainty, policy, sc, &run_cfg)
        })
        .collect::<Result<Vec<_>, TwinError>>()?;

    let mut residuals = vec![Vec::new(); n];
    for traj in &trajectories {
        for step in &traj.steps {
            for i in 0..n {
                residuals[i].push((step.q_true[i] - step.q_hat[i]).abs());
            }
        }
    }
    Ok(residuals)
}

/// Drift between provisional and final quantiles, logged by the calibrate
/// command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDrift {
    pub label: String,
    pub provisional: f64,
    pub final_quantile: f64,
}

pub struct TwoPassOutcome {
    pub table: CalibrationTable,
    pub drift: Vec<CalibrationDrift>,
}

/// Two-pass calibration. `keep_archive` retains per-node residual lists in
/// the table so alpha sweeps can requantile without re-rolling.
pub fn calibrate_two_pass(
    net: &NetworkModel,
    predictor: &dyn PredictorBank,
    cal_scenarios: &[&DemandScenario],
    budget: usize,
    alpha: f64,
    cfg: &TwinConfig,
    keep_archive: bool,
) -> Result<TwoPassOutcome, ConformalError> {
    let labels: Vec<String> = net
        .junctions()
        .iter()
        .map(|id| net.nodes[id.0].label.clone())
        .collect();

    let mut pass_cfg = *cfg;
    pass_cfg.budget = budget;

    // Pass 1: uniform-random rollout, provisional quantiles.
    let residuals1 = collect_residuals(
        net,
        predictor,
        &UncertaintyModel::FixedWidth { half_width: 0.0 },
        &SamplingPolicy::UniformRandom,
        cal_scenarios,
        &pass_cfg,
    )?;
    let provisional: Vec<f64> = residuals1
        .iter()
        .map(|r| conformal_quantile(r, alpha).map(|q| q.value))
        .collect::<Result<Vec<_>, _>>()?;

    // Pass 2: adaptive rollout under the provisional scores.
    let residuals2 = collect_residuals(
        net,
        predictor,
        &UncertaintyModel::Conformal {
            quantiles: provisional.clone(),
        },
        &SamplingPolicy::Adaptive,
        cal_scenarios,
        &pass_cfg,
    )?;

    let mut entries = Vec::with_capacity(labels.len());
    let mut drift = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let q = conformal_quantile(&residuals2[i], alpha)?;
        drift.push(CalibrationDrift {
            label: label.clone(),
            provisional: provisional[i],
            final_quantile: q.value,
        });
        entries.push(NodeCalibration {
            label: label.clone(),
            quantile: q.value,
            n_cal: residuals2[i].len(),
            degenerate: q.degenerate,
            residuals: keep_archive.then(|| residuals2[i].clone()),
        });
    }

    Ok(TwoPassOutcome {
        table: CalibrationTable {
            alpha,
            budget,
            entries,
        },
        drift,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::hanoi_builtin;
    use crate::sampling::ScenarioOracle;
    use crate::scenario::{generate_scenarios, GenConfig};
    use crate::seeding::stream_rng;
    use rand::RngExt;

    #[test]
    fn quantile_matches_order_statistic() {
        let residuals: Vec<f64> = (1..=19).map(|v| v as f64).collect();
        let q = conformal_quantile(&residuals, 0.1).unwrap();
        assert_eq!(q.value, 18.0);
        assert!(!q.degenerate);
    }

    #[test]
    fn quantile_takes_maximum_at_minimal_n() {
        let residuals: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let q = conformal_quantile(&residuals, 0.1).unwrap();
        assert_eq!(q.value, 9.0);
    }

    #[test]
    fn constant_residuals_give_that_constant() {
        for alpha in [0.05, 0.1, 0.2, 0.5] {
            let residuals = vec![3.25; 40];
            let q = conformal_quantile(&residuals, alpha).unwrap();
            assert_eq!(q.value, 3.25, "alpha {alpha}");
        }
    }

    #[test]
    fn too_few_residuals_is_an_error() {
        let err = conformal_quantile(&[1.0; 8], 0.1).unwrap_err();
        assert!(matches!(
            err,
            ConformalError::TooFewResiduals {
                needed: 9,
                have: 8,
                ..
            }
        ));
    }

    #[test]
    fn below_minimum_count_is_rejected_for_any_alpha() {
        // n = ceil(1/alpha) - 1 is the smallest usable residual count; one
        // fewer must error rather than fabricate a rank. (The +infinity
        // sentinel in `conformal_quantile` guards float corner cases above
        // that minimum and is exercised through the coverage metric.)
        for alpha in [0.3, 0.2, 0.1, 0.05] {
            let needed = (1.0f64 / alpha).ceil() as usize - 1;
            let residuals = vec![1.0; needed - 1];
            assert!(matches!(
                conformal_quantile(&residuals, alpha).unwrap_err(),
                ConformalError::TooFewResiduals { .. }
            ));
            let ok = conformal_quantile(&vec![1.0; needed], alpha).unwrap();
            assert!(!ok.degenerate);
        }
    }

    #[test]
    fn quantile_is_monotone_in_alpha() {
        let mut rng = stream_rng(2, &[1]);
        let residuals: Vec<f64> = (0..200).map(|_| rng.random::<f64>() * 10.0).collect();
        let q05 = conformal_quantile(&residuals, 0.05).unwrap().value;
        let q10 = conformal_quantile(&residuals, 0.10).unwrap().value;
        let q20 = conformal_quantile(&residuals, 0.20).unwrap().value;
        assert!(q05 >= q10 && q10 >= q20);
    }

    #[test]
    fn appending_a_larger_residual_never_shrinks_the_quantile() {
        let mut rng = stream_rng(3, &[1]);
        let mut residuals: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let before = conformal_quantile(&residuals, 0.1).unwrap().value;
        let max = residuals.iter().cloned().fold(0.0f64, f64::max);
        residuals.push(max + 1.0);
        let after = conformal_quantile(&residuals, 0.1).unwrap().value;
        assert!(after >= before);
    }

    #[test]
    fn interval_is_symmetric() {
        assert_eq!(prediction_interval(10.0, 0.0), (10.0, 10.0));
        assert_eq!(prediction_interval(10.0, 2.0), (8.0, 12.0));
        // Negative lower bounds are kept.
        assert_eq!(prediction_interval(1.0, 3.0), (-2.0, 4.0));
    }

    #[test]
    fn coverage_guarantee_holds_under_exchangeability() {
        // Draw calibration and test residuals i.i.d.; the fraction of test
        // residuals below the quantile must average at least 1 - alpha.
        let alpha = 0.1;
        let n_cal = 99;
        let n_test = 100;
        let trials = 1000;
        let mut rng = stream_rng(7, &[42]);
        let mut coverages = Vec::with_capacity(trials);
        for _ in 0..trials {
            let cal: Vec<f64> = (0..n_cal)
                .map(|_| -f64::ln(1.0 - rng.random::<f64>()))
                .collect();
            let q = conformal_quantile(&cal, alpha).unwrap().value;
            let covered = (0..n_test)
                .filter(|_| -f64::ln(1.0 - rng.random::<f64>()) <= q)
                .count();
            coverages.push(covered as f64 / n_test as f64);
        }
        let mean = coverages.iter().sum::<f64>() / trials as f64;
        let var = coverages.iter().map(|c| (c - mean).powi(2)).sum::<f64>()
            / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!(
            mean >= 1.0 - alpha - 3.0 * se,
            "mean coverage {mean} below guarantee (se {se})"
        );
        // Finite-sample upper bound for continuous scores.
        assert!(
            mean <= 1.0 - alpha + 1.0 / (n_cal as f64 + 1.0) + 3.0 * se,
            "mean coverage {mean} above band (se {se})"
        );
    }

    fn desk_scenarios() -> (crate::network::NetworkModel, crate::scenario::ScenarioSet) {
        let net = hanoi_builtin();
        let cfg = GenConfig {
            n_scenarios: 2,
            horizon_hours: 60,
            seed: 13,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&net, &cfg).unwrap();
        (net, set)
    }

    #[test]
    fn perfect_model_yields_zero_residuals() {
        let (net, set) = desk_scenarios();
        let sc = &set.scenarios[0];
        let oracle = ScenarioOracle {
            scenario: sc,
            offset: 0.0,
            lookback: 6,
        };
        let cfg = TwinConfig {
            budget: 10,
            warmup: 6,
            ..TwinConfig::default()
        };
        let residuals = collect_residuals(
            &net,
            &oracle,
            &UncertaintyModel::FixedWidth { half_width: 0.0 },
            &SamplingPolicy::UniformRandom,
            &[sc],
            &cfg,
        )
        .unwrap();
        for node in &residuals {
            assert!(node.iter().all(|r| *r == 0.0));
        }
    }

    #[test]
    fn constant_offset_model_yields_unit_residuals() {
        let (net, set) = desk_scenarios();
        let sc = &set.scenarios[0];
        let oracle = ScenarioOracle {
            scenario: sc,
            offset: 1.0,
            lookback: 6,
        };
        let cfg = TwinConfig {
            budget: 10,
            warmup: 6,
            ..TwinConfig::default()
        };
        let residuals = collect_residuals(
            &net,
            &oracle,
            &UncertaintyModel::FixedWidth { half_width: 0.0 },
            &SamplingPolicy::UniformRandom,
            &[sc],
            &cfg,
        )
        .unwrap();
        for node in &residuals {
            assert!(node.iter().all(|r| (r - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn residual_count_matches_scenarios_and_steps() {
        let (net, set) = desk_scenarios();
        let scenarios: Vec<&crate::scenario::DemandScenario> = set.scenarios.iter().collect();
        let oracle = ScenarioOracle {
            scenario: &set.scenarios[0],
            offset: 0.5,
            lookback: 6,
        };
        let cfg = TwinConfig {
            budget: 10,
            warmup: 6,
            ..TwinConfig::default()
        };
        let residuals = collect_residuals(
            &net,
            &oracle,
            &UncertaintyModel::FixedWidth { half_width: 0.0 },
            &SamplingPolicy::UniformRandom,
            &scenarios,
            &cfg,
        )
        .unwrap();
        let expected = set.scenarios.len() * (60 - 6);
        for node in &residuals {
            assert_eq!(node.len(), expected);
        }
    }

    #[test]
    fn two_pass_produces_full_table_and_archive() {
        let (net, set) = desk_scenarios();
        // The oracle reads one fixed scenario, so calibrate on that one.
        let scenarios = vec![&set.scenarios[0]];
        let oracle = ScenarioOracle {
            scenario: &set.scenarios[0],
            offset: 2.0,
            lookback: 6,
        };
        let cfg = TwinConfig {
            warmup: 6,
            ..TwinConfig::default()
        };
        let outcome = calibrate_two_pass(&net, &oracle, &scenarios, 12, 0.1, &cfg, true).unwrap();
        assert_eq!(outcome.table.entries.len(), net.junction_count());
        assert_eq!(outcome.table.budget, 12);
        for entry in &outcome.table.entries {
            assert!((entry.quantile - 2.0).abs() < 1e-12);
            assert!(entry.residuals.is_some());
        }
        // Requantile from the archive at a stricter level.
        let strict = outcome.table.requantile(0.05).unwrap();
        assert_eq!(strict.alpha, 0.05);
    }

    #[test]
    fn table_json_round_trips() {
        let table = CalibrationTable {
            alpha: 0.1,
            budget: 5,
            entries: vec![NodeCalibration {
                label: "2".into(),
                quantile: 1.25,
                n_cal: 100,
                degenerate: false,
                residuals: None,
            }],
        };
        let back = CalibrationTable::from_json(&table.to_json()).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn uncertainty_score_doubles_the_quantile() {
        let table = CalibrationTable {
            alpha: 0.1,
            budget: 5,
            entries: vec![
                NodeCalibration {
                    label: "a".into(),
                    quantile: 2.0,
                    n_cal: 10,
                    degenerate: false,
                    residuals: None,
                },
                NodeCalibration {
                    label: "b".into(),
                    quantile: 0.0,
                    n_cal: 10,
                    degenerate: false,
                    residuals: None,
                },
            ],
        };
        assert_eq!(table.uncertainty_score(0).unwrap(), 4.0);
        assert_eq!(table.uncertainty_score(1).unwrap(), 0.0);
        assert!(matches!(
            table.uncertainty_score(5),
            Err(ConformalError::UncalibratedNode(5))
        ));
    }
}
