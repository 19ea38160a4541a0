//! Evaluation metrics over twin trajectories: demand and pressure RMSE,
//! empirical interval coverage, pressure-safety violation rate, and
//! per-component timing profiles.
//!
//! All metrics run over recorded (post-warm-up) steps only. Pressure
//! metrics compare against ground-truth solves of the true demands with
//! the identical solver configuration, excluding non-converged twin steps
//! symmetrically.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hydraulics::{solve_steady_state, SolveError, SolverConfig};
use crate::network::NetworkModel;
use crate::sampling::{StepTimings, TwinTrajectory};
use crate::scenario::DemandScenario;

/// Pressure threshold (meters) below which service is considered unsafe.
pub const PRESSURE_SAFETY_THRESHOLD_M: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(&'static str),
    #[error("truth has {truth} steps, trajectory has {traj}")]
    StepMismatch { truth: usize, traj: usize },
    #[error("truth solve failed: {0}")]
    TruthSolve(#[from] SolveError),
}

/// Ground-truth junction pressures for every recorded step of a scenario,
/// solved from the true demands with the same solver configuration the
/// twin uses.
pub fn solve_truth_pressures(
    net: &NetworkModel,
    scenario: &DemandScenario,
    warmup: usize,
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>, MetricsError> {
    let junctions = net.junctions();
    let mut rows = Vec::with_capacity(scenario.steps.saturating_sub(warmup));
    for t in warmup..scenario.steps {
        let state = solve_steady_state(net, scenario.row(t), cfg)?;
        rows.push(junctions.iter().map(|id| state.pressures[id.0]).collect());
    }
    Ok(rows)
}

/// Root-mean-square error between hybrid and true demands, L/s.
pub fn rmse_demand(traj: &TwinTrajectory) -> Result<f64, MetricsError> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for step in &traj.steps {
        for (q, qt) in step.q_true.iter().zip(&step.q_tilde) {
            acc += (q - qt) * (q - qt);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyEvaluation("no recorded steps"));
    }
    Ok((acc / count as f64).sqrt())
}

/// Root-mean-square error between twin and true pressures, meters.
/// `truth_pressures` rows align with the trajectory's recorded steps;
/// non-converged steps are excluded from both sides.
pub fn rmse_pressure(
    traj: &TwinTrajectory,
    truth_pressures: &[Vec<f64>],
) -> Result<f64, MetricsError> {
    if truth_pressures.len() != traj.steps.len() {
        return Err(MetricsError::StepMismatch {
            truth: truth_pressures.len(),
            traj: traj.steps.len(),
        });
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (step, truth) in traj.steps.iter().zip(truth_pressures) {
        if !step.converged {
            continue;
        }
        for (p, pt) in truth.iter().zip(&step.pressure) {
            acc += (p - pt) * (p - pt);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyEvaluation("no converged steps"));
    }
    Ok((acc / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Fraction of unmeasured (t, i) with the true demand inside the
    /// interval; the primary figure (measured nodes cover trivially).
    pub unmeasured: f64,
    /// Same fraction over all (t, i), as in the plain metric definition.
    pub all_nodes: f64,
    pub n_unmeasured: usize,
    pub n_all: usize,
}

/// Empirical interval coverage of the true demands.
pub fn empirical_coverage(traj: &TwinTrajectory) -> Result<CoverageReport, MetricsError> {
    let mut hit_unmeasured = 0usize;
    let mut n_unmeasured = 0usize;
    let mut hit_all = 0usize;
    let mut n_all = 0usize;
    for step in &traj.steps {
        for (i, q) in step.q_true.iter().enumerate() {
            let inside = *q >= step.interval_lo[i] && *q <= step.interval_hi[i];
            n_all += 1;
            hit_all += inside as usize;
            if step.selected.binary_search(&i).is_err() {
                n_unmeasured += 1;
                hit_unmeasured += inside as usize;
            }
        }
    }
    if n_all == 0 {
        return Err(MetricsError::EmptyEvaluation("no intervals recorded"));
    }
    // A full-budget run has no unmeasured nodes; report 1.0 vacuously.
    let unmeasured = if n_unmeasured == 0 {
        1.0
    } else {
        hit_unmeasured as f64 / n_unmeasured as f64
    };
    Ok(CoverageReport {
        unmeasured,
        all_nodes: hit_all as f64 / n_all as f64,
        n_unmeasured,
        n_all,
    })
}

/// Fraction of evaluated (t, i) where the twin reports safe pressure
/// (>= 20 m) while the true pressure is below 20 m.
pub fn violation_rate(
    traj: &TwinTrajectory,
    truth_pressures: &[Vec<f64>],
) -> Result<f64, MetricsError> {
    if truth_pressures.len() != traj.steps.len() {
        return Err(MetricsError::StepMismatch {
            truth: truth_pressures.len(),
            traj: traj.steps.len(),
        });
    }
    let mut violations = 0usize;
    let mut count = 0usize;
    for (step, truth) in traj.steps.iter().zip(truth_pressures) {
        if !step.converged {
            continue;
        }
        for (p_true, p_twin) in truth.iter().zip(&step.pressure) {
            count += 1;
            if *p_twin >= PRESSURE_SAFETY_THRESHOLD_M && *p_true < PRESSURE_SAFETY_THRESHOLD_M {
                violations += 1;
            }
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptyEvaluation("no converged steps"));
    }
    Ok(violations as f64 / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub mean_ms: f64,
    pub p95_ms: f64,
}

/// Per-component wall-clock profile of the twin loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingProfile {
    pub inference: ComponentStats,
    pub uncertainty: ComponentStats,
    pub selection: ComponentStats,
    pub solve: ComponentStats,
    pub total_mean_ms: f64,
    /// (total - solve) / total, as a percentage of mean step time.
    pub overhead_pct: f64,
    pub steps: usize,
}

fn component_stats(samples: &mut [f64]) -> ComponentStats {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    let idx = ((samples.len() as f64 * 0.95).ceil() as usize).clamp(1, samples.len()) - 1;
    ComponentStats {
        mean_ms: mean,
        p95_ms: samples[idx],
    }
}

/// Aggregates per-step timings into means and p95s plus the non-solver
/// overhead share.
pub fn timing_profile(timings: &[StepTimings]) -> Result<TimingProfile, MetricsError> {
    if timings.is_empty() {
        return Err(MetricsError::EmptyEvaluation("no timing samples"));
    }
    let mut inference: Vec<f64> = timings.iter().map(|t| t.inference_ms).collect();
    let mut uncertainty: Vec<f64> = timings.iter().map(|t| t.uncertainty_ms).collect();
    let mut selection: Vec<f64> = timings.iter().map(|t| t.selection_ms).collect();
    let mut solve: Vec<f64> = timings.iter().map(|t| t.solve_ms).collect();
    let total_mean = timings.iter().map(StepTimings::total_ms).sum::<f64>()
        / timings.len() as f64;
    let solve_mean = solve.iter().sum::<f64>() / solve.len() as f64;
    let overhead_pct = if total_mean > 0.0 {
        (total_mean - solve_mean) / total_mean * 100.0
    } else {
        0.0
    };
    Ok(TimingProfile {
        inference: component_stats(&mut inference),
        uncertainty: component_stats(&mut uncertainty),
        selection: component_stats(&mut selection),
        solve: component_stats(&mut solve),
        total_mean_ms: total_mean,
        overhead_pct,
        steps: timings.len(),
    })
}

/// Everything the report tables need from one (policy, budget, sigma,
/// seed, scenario) run cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse_q: f64,
    pub rmse_p: f64,
    pub coverage: CoverageReport,
    pub violation_rate: f64,
    pub timing: TimingProfile,
}

pub fn evaluate_run(
    traj: &TwinTrajectory,
    truth_pressures: &[Vec<f64>],
) -> Result<EvaluationReport, MetricsError> {
    let timings: Vec<StepTimings> = traj.steps.iter().map(|s| s.timings).collect();
    Ok(EvaluationReport {
        rmse_q: rmse_demand(traj)?,
        rmse_p: rmse_pressure(traj, truth_pressures)?,
        coverage: empirical_coverage(traj)?,
        violation_rate: violation_rate(traj, truth_pressures)?,
        timing: timing_profile(&timings)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::TwinStep;

    fn step(
        t: usize,
        q_true: Vec<f64>,
        q_tilde: Vec<f64>,
        pressure: Vec<f64>,
        selected: Vec<usize>,
    ) -> TwinStep {
        let n = q_true.len();
        TwinStep {
            t,
            selected,
            q_hat: q_tilde.clone(),
            interval_lo: vec![0.0; n],
            interval_hi: vec![0.0; n],
            q_true,
            q_tilde,
            pressure,
            flows: Vec::new(),
            converged: true,
            solver_iterations: 1,
            mass_residual_lps: 0.0,
            timings: StepTimings::default(),
        }
    }

    fn traj(steps: Vec<TwinStep>) -> TwinTrajectory {
        TwinTrajectory {
            scenario_id: 0,
            budget: 0,
            warmup: 0,
            steps,
        }
    }

    #[test]
    fn exact_reconstruction_has_zero_rmse() {
        let tr = traj(vec![step(
            0,
            vec![1.0, 2.0],
            vec![1.0, 2.0],
            vec![30.0, 30.0],
            vec![],
        )]);
        assert_eq!(rmse_demand(&tr).unwrap(), 0.0);
    }

    #[test]
    fn constant_error_gives_that_rmse() {
        let tr = traj(vec![step(
            0,
            vec![1.0, 2.0, 3.0],
            vec![2.0, 3.0, 4.0],
            vec![30.0; 3],
            vec![],
        )]);
        assert_eq!(rmse_demand(&tr).unwrap(), 1.0);
    }

    #[test]
    fn rmse_matches_hand_computed_case() {
        // q = [[1,2],[3,4]], q~ = [[1,2],[3,6]]: mean squared error 4/4.
        let tr = traj(vec![
            step(0, vec![1.0, 2.0], vec![1.0, 2.0], vec![30.0; 2], vec![]),
            step(1, vec![3.0, 4.0], vec![3.0, 6.0], vec![30.0; 2], vec![]),
        ]);
        assert_eq!(rmse_demand(&tr).unwrap(), 1.0);
    }

    #[test]
    fn pressure_rmse_mirrors_demand_rmse() {
        let tr = traj(vec![
            step(0, vec![0.0; 2], vec![0.0; 2], vec![30.0, 30.0], vec![]),
            step(1, vec![0.0; 2], vec![0.0; 2], vec![30.0, 32.0], vec![]),
        ]);
        let truth = vec![vec![30.0, 30.0], vec![30.0, 30.0]];
        assert_eq!(rmse_pressure(&tr, &truth).unwrap(), 1.0);
        let exact = vec![vec![30.0, 30.0], vec![30.0, 32.0]];
        assert_eq!(rmse_pressure(&tr, &exact).unwrap(), 0.0);
    }

    #[test]
    fn non_converged_steps_are_excluded_symmetrically() {
        let mut bad = step(1, vec![0.0], vec![0.0], vec![99.0], vec![]);
        bad.converged = false;
        let tr = traj(vec![
            step(0, vec![0.0], vec![0.0], vec![30.0], vec![]),
            bad,
        ]);
        let truth = vec![vec![30.0], vec![10.0]];
        assert_eq!(rmse_pressure(&tr, &truth).unwrap(), 0.0);
    }

    #[test]
    fn infinite_intervals_cover_everything() {
        let mut s = step(0, vec![5.0, 50.0], vec![0.0; 2], vec![30.0; 2], vec![]);
        s.interval_lo = vec![f64::NEG_INFINITY; 2];
        s.interval_hi = vec![f64::INFINITY; 2];
        let report = empirical_coverage(&traj(vec![s])).unwrap();
        assert_eq!(report.unmeasured, 1.0);
        assert_eq!(report.all_nodes, 1.0);
    }

    #[test]
    fn zero_width_wrong_intervals_cover_nothing() {
        let mut s = step(0, vec![5.0, 50.0], vec![0.0; 2], vec![30.0; 2], vec![]);
        s.q_hat = vec![1.0, 1.0];
        s.interval_lo = vec![1.0, 1.0];
        s.interval_hi = vec![1.0, 1.0];
        let report = empirical_coverage(&traj(vec![s])).unwrap();
        assert_eq!(report.unmeasured, 0.0);
    }

    #[test]
    fn coverage_counts_unmeasured_nodes_only() {
        // Node 0 measured and covered; node 1 unmeasured and not covered.
        let mut s = step(0, vec![5.0, 50.0], vec![5.0, 10.0], vec![30.0; 2], vec![0]);
        s.interval_lo = vec![4.0, 9.0];
        s.interval_hi = vec![6.0, 11.0];
        let report = empirical_coverage(&traj(vec![s])).unwrap();
        assert_eq!(report.unmeasured, 0.0);
        assert_eq!(report.all_nodes, 0.5);
        assert_eq!(report.n_unmeasured, 1);
    }

    #[test]
    fn coverage_equals_symmetric_residual_rule() {
        // Interval membership must match |q - q_hat| <= half-width.
        let q_hat = [10.0, 20.0, 30.0];
        let q_true = [11.5, 18.0, 30.0];
        let half = [2.0, 1.0, 0.0];
        let mut s = step(0, q_true.to_vec(), q_hat.to_vec(), vec![30.0; 3], vec![]);
        s.q_hat = q_hat.to_vec();
        s.interval_lo = q_hat.iter().zip(&half).map(|(q, h)| q - h).collect();
        s.interval_hi = q_hat.iter().zip(&half).map(|(q, h)| q + h).collect();
        let report = empirical_coverage(&traj(vec![s])).unwrap();
        let by_residual = q_true
            .iter()
            .zip(&q_hat)
            .zip(&half)
            .filter(|((q, qh), h)| (*q - **qh).abs() <= **h)
            .count();
        assert_eq!(report.all_nodes, by_residual as f64 / 3.0);
    }

    #[test]
    fn violation_rate_matches_hand_case() {
        // p_true = [19,21,19,25], p_twin = [21,22,18,26] -> one violation.
        let s = step(
            0,
            vec![0.0; 4],
            vec![0.0; 4],
            vec![21.0, 22.0, 18.0, 26.0],
            vec![],
        );
        let truth = vec![vec![19.0, 21.0, 19.0, 25.0]];
        assert_eq!(violation_rate(&traj(vec![s]), &truth).unwrap(), 0.25);
    }

    #[test]
    fn exact_pressures_never_violate() {
        let s = step(0, vec![0.0; 2], vec![0.0; 2], vec![19.0, 25.0], vec![]);
        let truth = vec![vec![19.0, 25.0]];
        assert_eq!(violation_rate(&traj(vec![s]), &truth).unwrap(), 0.0);
    }

    #[test]
    fn optimistic_twin_always_violates() {
        let s = step(0, vec![0.0; 2], vec![0.0; 2], vec![21.0, 21.0], vec![]);
        let truth = vec![vec![19.0, 19.0]];
        assert_eq!(violation_rate(&traj(vec![s]), &truth).unwrap(), 1.0);
    }

    #[test]
    fn violations_are_subset_of_true_low_pressure() {
        let s = step(
            0,
            vec![0.0; 4],
            vec![0.0; 4],
            vec![21.0, 18.0, 25.0, 19.9],
            vec![],
        );
        let truth = vec![vec![19.0, 17.0, 30.0, 19.0]];
        let tr = traj(vec![s]);
        let v = violation_rate(&tr, &truth).unwrap();
        let low = truth[0]
            .iter()
            .filter(|p| **p < PRESSURE_SAFETY_THRESHOLD_M)
            .count() as f64
            / 4.0;
        assert!(v <= low);
    }

    #[test]
    fn timing_profile_attributes_overhead() {
        // Solver dominates: overhead must be near zero.
        let timings: Vec<StepTimings> = (0..20)
            .map(|_| StepTimings {
                inference_ms: 0.0,
                uncertainty_ms: 0.0,
                selection_ms: 0.0,
                solve_ms: 50.0,
            })
            .collect();
        let profile = timing_profile(&timings).unwrap();
        assert!(profile.overhead_pct.abs() < 1e-9);
        assert_eq!(profile.solve.mean_ms, 50.0);

        let timings: Vec<StepTimings> = (0..20)
            .map(|_| StepTimings {
                inference_ms: 10.0,
                uncertainty_ms: 0.0,
                selection_ms: 0.0,
                solve_ms: 40.0,
            })
            .collect();
        let profile = timing_profile(&timings).unwrap();
        assert!((profile.overhead_pct - 20.0).abs() < 1e-9);
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        let tr = traj(vec![]);
        assert!(matches!(
            rmse_demand(&tr),
            Err(MetricsError::EmptyEvaluation(_))
        ));
    }
}
