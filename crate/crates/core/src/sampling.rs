//! Sampling policies, measurement/prediction fusion, and the closed-loop
//! digital-twin driver.
//!
//! Each recorded step predicts all junction demands from fused history,
//! scores per-node uncertainty, selects a budget-limited measurement set,
//! fuses measurements with predictions, and re-solves the hydraulics on
//! the hybrid demand vector. The first `warmup` steps seed histories with
//! true values and are excluded from records and metrics.

use std::time::Instant;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::PredictorBank;
use crate::hydraulics::{solve_steady_state, HydraulicState, SolveError, SolverConfig};
use crate::network::NetworkModel;
use crate::scenario::DemandScenario;
use crate::seeding::{stream_rng, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SamplingPolicy {
    /// Top-B nodes by uncertainty score, ties broken by lower index.
    Adaptive,
    /// B distinct nodes drawn fresh each step from the run's policy stream.
    UniformRandom,
    /// Fixed set precomputed from training-split demand variance.
    StaticHighVariance { set: Vec<usize> },
    /// Blocks of B consecutive indices cycling with the step counter.
    RoundRobin,
    /// Every junction measured every step.
    Full,
}

impl SamplingPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            SamplingPolicy::Adaptive => "adaptive",
            SamplingPolicy::UniformRandom => "uniform_random",
            SamplingPolicy::StaticHighVariance { .. } => "static_high_variance",
            SamplingPolicy::RoundRobin => "round_robin",
            SamplingPolicy::Full => "full",
        }
    }
}

/// How sensor noise perturbs measured demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    /// `q * (1 + sigma * eta)`, sigma relative.
    Multiplicative,
    /// `q + sigma * eta`, sigma in L/s.
    Additive,
}

/// Per-node uncertainty source scored at every step.
#[derive(Debug, Clone, PartialEq)]
pub enum UncertaintyModel {
    /// Conformal interval width: score `2 * quantile`, half-width the
    /// quantile itself. One quantile per junction.
    Conformal { quantiles: Vec<f64> },
    /// Variance of the trailing window of predictions; interval half-width
    /// is the corresponding standard deviation. No coverage guarantee.
    RollingVariance { window: usize },
    /// Constant interval half-width in L/s; scores carry no information,
    /// so adaptive selection degenerates to the index tie-break.
    FixedWidth { half_width: f64 },
}

impl UncertaintyModel {
    /// (score, interval half-width) for one junction at the current step.
    fn score(&self, node: usize, prediction_history: &[Vec<f64>]) -> (f64, f64) {
        match self {
            UncertaintyModel::Conformal { quantiles } => {
                let q = quantiles[node];
                (2.0 * q, q)
            }
            UncertaintyModel::RollingVariance { window } => {
                let hist = &prediction_history[node];
                let take = hist.len().min(*window);
                if take < 2 {
                    return (0.0, 0.0);
                }
                let tail = &hist[hist.len() - take..];
                let mean = tail.iter().sum::<f64>() / take as f64;
                let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / take as f64;
                (var, var.sqrt())
            }
            UncertaintyModel::FixedWidth { half_width } => (*half_width, *half_width),
        }
    }
}

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("budget {budget} exceeds junction count {junctions}")]
    BudgetExceedsNetwork { budget: usize, junctions: usize },
    #[error("scenario has {steps} steps; needs more than warmup {warmup}")]
    ScenarioTooShort { steps: usize, warmup: usize },
    #[error("scenario junction count {scenario} does not match network {network}")]
    JunctionMismatch { scenario: usize, network: usize },
    #[error("rollout failed at scenario {scenario_id} step {t}: {source}")]
    RolloutFailure {
        scenario_id: usize,
        t: usize,
        source: SolveError,
    },
}

/// Wall-clock per-component cost of one step, milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub inference_ms: f64,
    pub uncertainty_ms: f64,
    pub selection_ms: f64,
    pub solve_ms: f64,
}

impl StepTimings {
    pub fn total_ms(&self) -> f64 {
        self.inference_ms + self.uncertainty_ms + self.selection_ms + self.solve_ms
    }
}

/// One recorded timestep of the twin loop. Vectors are in junction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinStep {
    pub t: usize,
    /// Measured junction positions, ascending. Always exactly B entries.
    pub selected: Vec<usize>,
    pub q_true: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub q_tilde: Vec<f64>,
    pub interval_lo: Vec<f64>,
    pub interval_hi: Vec<f64>,
    /// Twin pressure estimate per junction, meters.
    pub pressure: Vec<f64>,
    /// Twin pipe flows, L/s.
    pub flows: Vec<f64>,
    pub converged: bool,
    pub solver_iterations: usize,
    pub mass_residual_lps: f64,
    pub timings: StepTimings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinTrajectory {
    pub scenario_id: usize,
    pub budget: usize,
    pub warmup: usize,
    pub steps: Vec<TwinStep>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwinConfig {
    /// Measured nodes per step (may be zero for diagnostics).
    pub budget: usize,
    pub sensor_sigma: f64,
    pub noise_mode: NoiseMode,
    /// History steps seeded with true values before the loop starts; the
    /// effective warm-up is at least the predictor's lookback.
    pub warmup: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig {
            budget: 0,
            sensor_sigma: 0.0,
            noise_mode: NoiseMode::Additive,
            warmup: 24,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

/// Budget-limited node selection. `uncertainties` must be finite.
///
/// Deterministic given the policy, step and rng state; the returned set is
/// sorted ascending and always has exactly `budget` members.
pub fn select_nodes(
    policy: &SamplingPolicy,
    uncertainties: &[f64],
    budget: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, TwinError> {
    let n = uncertainties.len();
    if budget > n {
        return Err(TwinError::BudgetExceedsNetwork {
            budget,
            junctions: n,
        });
    }
    let mut selected = match policy {
        SamplingPolicy::Full => (0..n).collect::<Vec<_>>(),
        SamplingPolicy::Adaptive => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                uncertainties[b]
                    .partial_cmp(&uncertainties[a])
                    .expect("finite uncertainty scores")
                    .then(a.cmp(&b))
            });
            order.truncate(budget);
            order
        }
        SamplingPolicy::UniformRandom => {
            // Partial Fisher-Yates: first `budget` slots of a fresh index vec.
            let mut order: Vec<usize> = (0..n).collect();
            for i in 0..budget.min(n.saturating_sub(1)) {
                let j = rng.random_range(i..n);
                order.swap(i, j);
            }
            order.truncate(budget);
            order
        }
        SamplingPolicy::RoundRobin => (0..budget).map(|j| (t * budget + j) % n).collect(),
        SamplingPolicy::StaticHighVariance { set } => {
            assert_eq!(set.len(), budget, "static set must match the budget");
            set.clone()
        }
    };
    selected.sort_unstable();
    selected.dedup();
    debug_assert_eq!(selected.len(), budget, "selection must have B distinct nodes");
    Ok(selected)
}

/// Hybrid state construction: measured entries take the (possibly noisy)
/// true value, unmeasured entries take the prediction; everything is
/// clamped at zero. With `sigma = 0` measured entries are bitwise the true
/// values.
pub fn fuse_state(
    true_demands: &[f64],
    predictions: &[f64],
    selected: &[usize],
    sensor_sigma: f64,
    noise_mode: NoiseMode,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    assert_eq!(true_demands.len(), predictions.len());
    let mut fused = predictions.to_vec();
    for &i in selected {
        fused[i] = if sensor_sigma == 0.0 {
            true_demands[i]
        } else {
            let eta: f64 = rng.sample(StandardNormal);
            let measured = match noise_mode {
                NoiseMode::Multiplicative => true_demands[i] * (1.0 + sensor_sigma * eta),
                NoiseMode::Additive => true_demands[i] + sensor_sigma * eta,
            };
            measured.max(0.0)
        };
    }
    for v in fused.iter_mut() {
        *v = v.max(0.0);
    }
    fused
}

/// Top-B junctions by demand variance over the training scenarios,
/// deterministic with the same index tie-break as adaptive selection.
pub fn precompute_static_set(train_scenarios: &[&DemandScenario], budget: usize) -> Vec<usize> {
    let n = train_scenarios.first().map_or(0, |s| s.junctions);
    let mut count = 0usize;
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for sc in train_scenarios {
        for t in 0..sc.steps {
            count += 1;
            for (i, &q) in sc.row(t).iter().enumerate() {
                // Welford update per node.
                let delta = q - mean[i];
                mean[i] += delta / count as f64;
                m2[i] += delta * (q - mean[i]);
            }
        }
    }
    let variance: Vec<f64> = m2
        .iter()
        .map(|v| if count > 0 { v / count as f64 } else { 0.0 })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        variance[b]
            .partial_cmp(&variance[a])
            .expect("finite variances")
            .then(a.cmp(&b))
    });
    order.truncate(budget.min(n));
    order.sort_unstable();
    order
}

/// Runs the closed twin loop over one scenario.
///
/// Per recorded step: predict every junction from its fused history,
/// score uncertainties, select `budget` nodes, fuse measurements with
/// predictions, feed the hybrid vector to the hydraulic solver, and log
/// everything. Solver non-convergence is logged and the previous
/// hydraulic state is carried forward with the step flagged; it only
/// becomes an error when no prior state exists.
pub fn run_digital_twin(
    net: &NetworkModel,
    predictor: &dyn PredictorBank,
    uncertainty: &UncertaintyModel,
    policy: &SamplingPolicy,
    scenario: &DemandScenario,
    cfg: &TwinConfig,
) -> Result<TwinTrajectory, TwinError> {
    let n = net.junction_count();
    if scenario.junctions != n {
        return Err(TwinError::JunctionMismatch {
            scenario: scenario.junctions,
            network: n,
        });
    }
    if cfg.budget > n {
        return Err(TwinError::BudgetExceedsNetwork {
            budget: cfg.budget,
            junctions: n,
        });
    }
    let lookback = predictor.lookback();
    let warmup = cfg.warmup.max(lookback);
    if scenario.steps <= warmup {
        return Err(TwinError::ScenarioTooShort {
            steps: scenario.steps,
            warmup,
        });
    }

    let mut histories: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..warmup).map(|t| scenario.get(t, i)).collect())
        .collect();
    let mut prediction_history: Vec<Vec<f64>> = vec![Vec::new(); n];

    // Rolling-variance scoring needs a primed prediction window: compute
    // teacher-forced predictions over the warm-up tail so the first
    // recorded step sees a full window.
    if let UncertaintyModel::RollingVariance { window } = uncertainty {
        let start = lookback.max(warmup.saturating_sub(*window));
        for t in start..warmup {
            for (i, hist) in prediction_history.iter_mut().enumerate() {
                hist.push(predictor.predict(i, &histories[i][..t]));
            }
        }
    }

    let mut policy_rng = stream_rng(cfg.seed, &[tags::POLICY]);
    let mut last_state: Option<HydraulicState> = None;
    let mut steps = Vec::with_capacity(scenario.steps - warmup);

    for t in warmup..scenario.steps {
        let q_true = scenario.row(t).to_vec();

        let t0 = Instant::now();
        let q_hat: Vec<f64> = (0..n)
            .map(|i| predictor.predict(i, &histories[i]))
            .collect();
        let inference_ms = t0.elapsed().as_secs_f64() * 1e3;

        let t1 = Instant::now();
        if matches!(uncertainty, UncertaintyModel::RollingVariance { .. }) {
            for (hist, &pred) in prediction_history.iter_mut().zip(&q_hat) {
                hist.push(pred);
            }
        }
        let mut scores = vec![0.0; n];
        let mut half_widths = vec![0.0; n];
        for i in 0..n {
            let (u, half) = uncertainty.score(i, &prediction_history);
            scores[i] = u;
            half_widths[i] = half;
        }
        let uncertainty_ms = t1.elapsed().as_secs_f64() * 1e3;

        let t2 = Instant::now();
        let selected = select_nodes(policy, &scores, cfg.budget, t - warmup, &mut policy_rng)?;
        let selection_ms = t2.elapsed().as_secs_f64() * 1e3;

        let mut noise_rng = stream_rng(cfg.seed, &[tags::SENSOR_NOISE, t as u64]);
        let q_tilde = fuse_state(
            &q_true,
            &q_hat,
            &selected,
            cfg.sensor_sigma,
            cfg.noise_mode,
            &mut noise_rng,
        );

        for (hist, &fused) in histories.iter_mut().zip(&q_tilde) {
            hist.push(fused);
        }

        let t3 = Instant::now();
        let solve = solve_steady_state(net, &q_tilde, &cfg.solver);
        let solve_ms = t3.elapsed().as_secs_f64() * 1e3;

        let (state, converged) = match solve {
            Ok(state) => (state, true),
            Err(err @ SolveError::NonConvergence { .. }) => match &last_state {
                Some(prev) => (prev.clone(), false),
                None => {
                    return Err(TwinError::RolloutFailure {
                        scenario_id: scenario.scenario_id,
                        t,
                        source: err,
                    });
                }
            },
            Err(err) => {
                return Err(TwinError::RolloutFailure {
                    scenario_id: scenario.scenario_id,
                    t,
                    source: err,
                });
            }
        };

        let junction_pressures: Vec<f64> = net
            .junctions()
            .iter()
            .map(|id| state.pressures[id.0])
            .collect();
        steps.push(TwinStep {
            t,
            selected: selected.clone(),
            interval_lo: q_hat
                .iter()
                .zip(&half_widths)
                .map(|(q, h)| q - h)
                .collect(),
            interval_hi: q_hat
                .iter()
                .zip(&half_widths)
                .map(|(q, h)| q + h)
                .collect(),
            q_true,
            q_hat,
            q_tilde,
            pressure: junction_pressures,
            flows: state.flows_lps.clone(),
            converged,
            solver_iterations: state.iterations,
            mass_residual_lps: state.mass_residual_lps,
            timings: StepTimings {
                inference_ms,
                uncertainty_ms,
                selection_ms,
                solve_ms,
            },
        });
        last_state = Some(state);
    }

    Ok(TwinTrajectory {
        scenario_id: scenario.scenario_id,
        budget: cfg.budget,
        warmup,
        steps,
    })
}

/// Diagnostic predictor that reads the true scenario (the history length
/// encodes the current step). Useful for isolating hydraulic-only error
/// and for calibration tests.
pub struct ScenarioOracle<'a> {
    pub scenario: &'a DemandScenario,
    pub offset: f64,
    pub lookback: usize,
}

impl PredictorBank for ScenarioOracle<'_> {
    fn lookback(&self) -> usize {
        self.lookback
    }

    fn predict(&self, node: usize, history: &[f64]) -> f64 {
        let t = history.len();
        self.scenario.get(t, node) + self.offset
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::hanoi_builtin;
    use crate::scenario::{generate_scenarios, GenConfig};

    fn rng() -> ChaCha8Rng {
        stream_rng(1, &[tags::POLICY])
    }

    #[test]
    fn adaptive_takes_top_k() {
        let sel = select_nodes(&SamplingPolicy::Adaptive, &[3.0, 1.0, 2.0], 2, 0, &mut rng())
            .unwrap();
        assert_eq!(sel, vec![0, 2]);
    }

    #[test]
    fn adaptive_ties_break_to_lower_index() {
        let sel = select_nodes(&SamplingPolicy::Adaptive, &[5.0; 4], 2, 0, &mut rng()).unwrap();
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn round_robin_cycles_in_blocks() {
        let u = [0.0; 5];
        let mut r = rng();
        assert_eq!(
            select_nodes(&SamplingPolicy::RoundRobin, &u, 2, 0, &mut r).unwrap(),
            vec![0, 1]
        );
        assert_eq!(
            select_nodes(&SamplingPolicy::RoundRobin, &u, 2, 1, &mut r).unwrap(),
            vec![2, 3]
        );
        assert_eq!(
            select_nodes(&SamplingPolicy::RoundRobin, &u, 2, 2, &mut r).unwrap(),
            vec![0, 4]
        );
    }

    #[test]
    fn uniform_random_draws_distinct_budget_sets() {
        let u = [0.0; 10];
        let mut r = rng();
        for _ in 0..50 {
            let sel = select_nodes(&SamplingPolicy::UniformRandom, &u, 4, 0, &mut r).unwrap();
            assert_eq!(sel.len(), 4);
            assert!(sel.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn budget_above_network_size_errors() {
        let err = select_nodes(&SamplingPolicy::Adaptive, &[1.0; 3], 4, 0, &mut rng());
        assert!(matches!(
            err,
            Err(TwinError::BudgetExceedsNetwork {
                budget: 4,
                junctions: 3
            })
        ));
    }

    #[test]
    fn adaptive_selection_is_scale_invariant() {
        let u = [0.4, 7.0, 0.1, 3.0, 5.5, 2.2];
        let scaled: Vec<f64> = u.iter().map(|x| x * 137.0).collect();
        let a = select_nodes(&SamplingPolicy::Adaptive, &u, 3, 0, &mut rng()).unwrap();
        let b = select_nodes(&SamplingPolicy::Adaptive, &scaled, 3, 0, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adaptive_selection_maximizes_total_uncertainty() {
        // Brute force over all size-B subsets for a small N.
        let u = [0.9, 0.1, 2.4, 2.4, 1.7, 0.3, 3.3, 0.05];
        let b = 3;
        let sel = select_nodes(&SamplingPolicy::Adaptive, &u, b, 0, &mut rng()).unwrap();
        let sum: f64 = sel.iter().map(|&i| u[i]).sum();
        let mut best = 0.0f64;
        for mask in 0u32..(1 << u.len()) {
            if mask.count_ones() as usize != b {
                continue;
            }
            let s: f64 = (0..u.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| u[i])
                .sum();
            best = best.max(s);
        }
        assert!((sum - best).abs() < 1e-12);
    }

    #[test]
    fn fusion_mixes_measured_and_predicted() {
        let fused = fuse_state(
            &[5.0, 7.0],
            &[4.0, 9.0],
            &[1],
            0.0,
            NoiseMode::Additive,
            &mut rng(),
        );
        assert_eq!(fused, vec![4.0, 7.0]);
    }

    #[test]
    fn empty_selection_returns_predictions() {
        let fused = fuse_state(
            &[5.0, 7.0],
            &[4.0, 9.0],
            &[],
            0.0,
            NoiseMode::Additive,
            &mut rng(),
        );
        assert_eq!(fused, vec![4.0, 9.0]);
    }

    #[test]
    fn full_selection_with_zero_sigma_is_exact() {
        let truth = [5.25, 7.5, 0.125];
        let fused = fuse_state(
            &truth,
            &[0.0, 0.0, 0.0],
            &[0, 1, 2],
            0.0,
            NoiseMode::Multiplicative,
            &mut rng(),
        );
        assert_eq!(fused, truth.to_vec());
    }

    #[test]
    fn static_set_ranks_by_variance() {
        use crate::scenario::DemandScenario;
        // Node 1 constant, others varying.
        let rows = vec![
            vec![1.0, 5.0, 10.0],
            vec![3.0, 5.0, 0.0],
            vec![2.0, 5.0, 20.0],
            vec![4.0, 5.0, 5.0],
        ];
        let sc = DemandScenario::from_rows(0, rows);
        let set = precompute_static_set(&[&sc], 2);
        assert_eq!(set, vec![0, 2]);
        assert_eq!(precompute_static_set(&[&sc], 3), vec![0, 1, 2]);
    }

    #[test]
    fn full_policy_zero_sigma_reproduces_truth() {
        let net = hanoi_builtin();
        let cfg = GenConfig {
            n_scenarios: 1,
            horizon_hours: 40,
            seed: 3,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&net, &cfg).unwrap();
        let sc = &set.scenarios[0];
        let oracle = ScenarioOracle {
            scenario: sc,
            offset: 0.0,
            lookback: 4,
        };
        let twin_cfg = TwinConfig {
            budget: net.junction_count(),
            warmup: 4,
            ..TwinConfig::default()
        };
        let traj = run_digital_twin(
            &net,
            &oracle,
            &UncertaintyModel::FixedWidth { half_width: 1.0 },
            &SamplingPolicy::Full,
            sc,
            &twin_cfg,
        )
        .unwrap();
        for step in &traj.steps {
            assert_eq!(step.q_tilde, step.q_true);
            assert_eq!(step.selected.len(), net.junction_count());
        }
    }

    #[test]
    fn zero_budget_is_pure_rollout() {
        let net = hanoi_builtin();
        let cfg = GenConfig {
            n_scenarios: 1,
            horizon_hours: 30,
            seed: 3,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&net, &cfg).unwrap();
        let sc = &set.scenarios[0];
        let oracle = ScenarioOracle {
            scenario: sc,
            offset: 1.0,
            lookback: 4,
        };
        let twin_cfg = TwinConfig {
            budget: 0,
            warmup: 4,
            ..TwinConfig::default()
        };
        let traj = run_digital_twin(
            &net,
            &oracle,
            &UncertaintyModel::FixedWidth { half_width: 1.0 },
            &SamplingPolicy::Adaptive,
            sc,
            &twin_cfg,
        )
        .unwrap();
        for step in &traj.steps {
            assert!(step.selected.is_empty());
            assert_eq!(step.q_tilde, step.q_hat);
        }
    }

    #[test]
    fn constant_scores_keep_selected_set_constant_over_time() {
        let net = hanoi_builtin();
        let cfg = GenConfig {
            n_scenarios: 1,
            horizon_hours: 40,
            seed: 5,
            ..GenConfig::default()
        };
        let set = generate_scenarios(&net, &cfg).unwrap();
        let sc = &set.scenarios[0];
        let oracle = ScenarioOracle {
            scenario: sc,
            offset: 0.5,
            lookback: 4,
        };
        let quantiles: Vec<f64> = (0..net.junction_count())
            .map(|i| (i as f64 * 0.77).sin().abs() * 3.0)
            .collect();
        let twin_cfg = TwinConfig {
            budget: 12,
            warmup: 4,
            ..TwinConfig::default()
        };
        let traj = run_digital_twin(
            &net,
            &oracle,
            &UncertaintyModel::Conformal { quantiles },
            &SamplingPolicy::Adaptive,
            sc,
            &twin_cfg,
        )
        .unwrap();
        let first = traj.steps[0].selected.clone();
        for step in &traj.steps {
            assert_eq!(step.selected, first);
            assert_eq!(step.selected.len(), 12);
        }
    }
}
