//! Python bindings for the water-network digital twin: network parsing,
//! hydraulic solving, scenario generation, per-node forecasting, conformal
//! calibration helpers, and the closed-loop twin runner.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use aquatwin::conformal;
use aquatwin::forecast::{
    train_node_model, ForecastModel, LstmBank, LstmHyperparams, PredictorBank,
};
use aquatwin::hydraulics::{self, SolverConfig};
use aquatwin::metrics::{evaluate_run, solve_truth_pressures};
use aquatwin::network::{self, NetworkModel};
use aquatwin::sampling::{self, NoiseMode, SamplingPolicy, TwinConfig, UncertaintyModel};
use aquatwin::scenario::{self, DemandScenario, GenConfig};
use aquatwin::seeding::{stream_rng, tags};

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Water distribution network: junctions, fixed-head sources, pipes.
#[pyclass(name = "Network")]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkModel,
}

#[pymethods]
impl PyNetwork {
    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn pipe_count(&self) -> usize {
        self.inner.pipe_count()
    }

    #[getter]
    fn junction_count(&self) -> usize {
        self.inner.junction_count()
    }

    /// Junction labels in the order demand vectors use.
    fn junction_labels(&self) -> Vec<String> {
        self.inner
            .junctions()
            .iter()
            .map(|id| self.inner.nodes[id.0].label.clone())
            .collect()
    }

    /// Base demands (L/s) in junction order.
    fn base_demands(&self) -> Vec<f64> {
        self.inner.base_demands()
    }

    /// Invariant violations as human-readable strings; empty when valid.
    fn validate(&self) -> Vec<String> {
        network::validate_network(&self.inner)
            .findings
            .iter()
            .map(|f| format!("{f:?}"))
            .collect()
    }

    /// Serialize back to INP text.
    fn to_inp(&self) -> String {
        network::serialize_inp(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(nodes={}, pipes={}, junctions={})",
            self.inner.node_count(),
            self.inner.pipe_count(),
            self.inner.junction_count()
        )
    }
}

/// Built-in Hanoi benchmark network (31 nodes, 34 pipes).
#[pyfunction]
fn hanoi_network() -> PyNetwork {
    PyNetwork {
        inner: network::hanoi_builtin(),
    }
}

/// Parse EPANET-style INP text.
#[pyfunction]
fn parse_inp(text: &str) -> PyResult<PyNetwork> {
    let parsed = network::parse_inp(text).map_err(value_err)?;
    Ok(PyNetwork {
        inner: parsed.network,
    })
}

/// Rectangular grid network fed by one reservoir, for scale experiments.
#[pyfunction]
fn grid_network(rows: usize, cols: usize, base_demand_lps: f64) -> PyNetwork {
    PyNetwork {
        inner: network::grid_network(rows, cols, base_demand_lps),
    }
}

/// Signed Hazen-Williams headloss in meters (flow in L/s, length and
/// diameter in meters, Hazen-Williams C roughness).
#[pyfunction]
fn hazen_williams_headloss(flow_lps: f64, length_m: f64, diameter_m: f64, roughness: f64) -> f64 {
    hydraulics::hazen_williams_headloss(flow_lps, length_m, diameter_m, roughness)
}

/// Converged hydraulic state.
#[pyclass(name = "HydraulicState")]
struct PyHydraulicState {
    #[pyo3(get)]
    heads: Vec<f64>,
    #[pyo3(get)]
    pressures: Vec<f64>,
    #[pyo3(get)]
    flows_lps: Vec<f64>,
    #[pyo3(get)]
    iterations: usize,
    #[pyo3(get)]
    mass_residual_lps: f64,
}

/// Steady-state solve for junction demands (L/s, junction order).
#[pyfunction]
fn solve_steady_state(net: &PyNetwork, demands_lps: Vec<f64>) -> PyResult<PyHydraulicState> {
    let state = hydraulics::solve_steady_state(&net.inner, &demands_lps, &SolverConfig::default())
        .map_err(value_err)?;
    Ok(PyHydraulicState {
        heads: state.heads,
        pressures: state.pressures,
        flows_lps: state.flows_lps,
        iterations: state.iterations,
        mass_residual_lps: state.mass_residual_lps,
    })
}

/// Synthetic demand scenarios as nested lists
/// `[scenario][timestep][junction]`, L/s.
#[pyfunction]
#[pyo3(signature = (net, n_scenarios, horizon_hours, seed,
                    diurnal_amplitude = 0.2, weekly_amplitude = 0.05,
                    noise_cv = 0.08, commercial_fraction = 0.4))]
#[allow(clippy::too_many_arguments)]
fn generate_demands(
    net: &PyNetwork,
    n_scenarios: usize,
    horizon_hours: usize,
    seed: u64,
    diurnal_amplitude: f64,
    weekly_amplitude: f64,
    noise_cv: f64,
    commercial_fraction: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let cfg = GenConfig {
        n_scenarios,
        horizon_hours,
        seed,
        diurnal_amplitude,
        weekly_amplitude,
        noise_cv,
        commercial_fraction,
    };
    let set = scenario::generate_scenarios(&net.inner, &cfg).map_err(value_err)?;
    Ok(set
        .scenarios
        .iter()
        .map(|sc| (0..sc.steps).map(|t| sc.row(t).to_vec()).collect())
        .collect())
}

/// Finite-sample conformal quantile at miscoverage `alpha`.
#[pyfunction]
fn conformal_quantile(residuals: Vec<f64>, alpha: f64) -> PyResult<f64> {
    conformal::conformal_quantile(&residuals, alpha)
        .map(|q| q.value)
        .map_err(value_err)
}

/// Symmetric conformal interval `(lo, hi)` around a point forecast.
#[pyfunction]
fn prediction_interval(q_hat: f64, quantile: f64) -> (f64, f64) {
    conformal::prediction_interval(q_hat, quantile)
}

/// Top-`budget` indices by uncertainty score (ties break to lower index).
#[pyfunction]
fn select_top_uncertain(scores: Vec<f64>, budget: usize) -> PyResult<Vec<usize>> {
    let mut rng = stream_rng(0, &[tags::POLICY]);
    sampling::select_nodes(&SamplingPolicy::Adaptive, &scores, budget, 0, &mut rng)
        .map_err(value_err)
}

/// Hybrid demand vector: exact measurements on `selected`, predictions
/// elsewhere.
#[pyfunction]
fn fuse_demands(
    true_demands: Vec<f64>,
    predictions: Vec<f64>,
    selected: Vec<usize>,
) -> PyResult<Vec<f64>> {
    if true_demands.len() != predictions.len() {
        return Err(value_err("truth and prediction lengths differ"));
    }
    if selected.iter().any(|&i| i >= true_demands.len()) {
        return Err(value_err("selected index out of range"));
    }
    let mut rng = stream_rng(0, &[tags::SENSOR_NOISE]);
    Ok(sampling::fuse_state(
        &true_demands,
        &predictions,
        &selected,
        0.0,
        NoiseMode::Additive,
        &mut rng,
    ))
}

/// Trained per-node LSTM demand forecaster.
#[pyclass(name = "Forecaster")]
#[derive(Clone)]
struct PyForecaster {
    inner: ForecastModel,
}

#[pymethods]
impl PyForecaster {
    #[getter]
    fn lookback(&self) -> usize {
        self.inner.hyper.lookback
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    /// Forecast the next value from the latest `lookback` history values.
    fn predict(&self, history: Vec<f64>) -> PyResult<f64> {
        self.inner.predict(&history).map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<PyForecaster> {
        ForecastModel::from_json(text)
            .map(|inner| PyForecaster { inner })
            .map_err(value_err)
    }
}

/// Train one forecaster on per-scenario series of a single node.
#[pyfunction]
#[pyo3(signature = (series, label, lookback = 24, hidden = 16,
                    max_epochs = 20, patience = 4, batch_size = 32,
                    seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_forecaster(
    series: Vec<Vec<f64>>,
    label: &str,
    lookback: usize,
    hidden: usize,
    max_epochs: usize,
    patience: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<PyForecaster> {
    let hyper = LstmHyperparams {
        lookback,
        hidden,
        max_epochs,
        patience,
        batch_size,
        seed,
        ..LstmHyperparams::default()
    };
    train_node_model(&series, &hyper, label, 0)
        .map(|inner| PyForecaster { inner })
        .map_err(value_err)
}

/// Metrics of one closed-loop twin run.
#[pyclass(name = "TwinSummary")]
struct PyTwinSummary {
    #[pyo3(get)]
    rmse_q: f64,
    #[pyo3(get)]
    rmse_p: f64,
    #[pyo3(get)]
    coverage_unmeasured: f64,
    #[pyo3(get)]
    violation_rate: f64,
    #[pyo3(get)]
    steps: usize,
    #[pyo3(get)]
    selected_first_step: Vec<usize>,
}

/// Run the conformal-guided adaptive twin loop over one scenario.
///
/// `models`: one forecaster per junction; `quantiles`: per-junction
/// conformal interval half-widths driving both scores and intervals;
/// `scenario`: `[timestep][junction]` true demands.
#[pyfunction]
#[pyo3(signature = (net, models, quantiles, scenario, budget, warmup = 24, seed = 0))]
fn run_adaptive_twin(
    net: &PyNetwork,
    models: Vec<PyForecaster>,
    quantiles: Vec<f64>,
    scenario: Vec<Vec<f64>>,
    budget: usize,
    warmup: usize,
    seed: u64,
) -> PyResult<PyTwinSummary> {
    if models.len() != net.inner.junction_count() {
        return Err(value_err("need one model per junction"));
    }
    let bank = LstmBank {
        models: models.into_iter().map(|m| m.inner).collect(),
    };
    let sc = DemandScenario::from_rows(0, scenario);
    let cfg = TwinConfig {
        budget,
        warmup,
        seed,
        ..TwinConfig::default()
    };
    let traj = sampling::run_digital_twin(
        &net.inner,
        &bank,
        &UncertaintyModel::Conformal { quantiles },
        &SamplingPolicy::Adaptive,
        &sc,
        &cfg,
    )
    .map_err(value_err)?;
    let warmup_used = cfg.warmup.max(bank.lookback());
    let truth =
        solve_truth_pressures(&net.inner, &sc, warmup_used, &cfg.solver).map_err(value_err)?;
    let report = evaluate_run(&traj, &truth).map_err(value_err)?;
    Ok(PyTwinSummary {
        rmse_q: report.rmse_q,
        rmse_p: report.rmse_p,
        coverage_unmeasured: report.coverage.unmeasured,
        violation_rate: report.violation_rate,
        steps: traj.steps.len(),
        selected_first_step: traj.steps[0].selected.clone(),
    })
}

#[pymodule]
fn aquatwin_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyHydraulicState>()?;
    m.add_class::<PyForecaster>()?;
    m.add_class::<PyTwinSummary>()?;
    m.add_function(wrap_pyfunction!(hanoi_network, m)?)?;
    m.add_function(wrap_pyfunction!(parse_inp, m)?)?;
    m.add_function(wrap_pyfunction!(grid_network, m)?)?;
    m.add_function(wrap_pyfunction!(hazen_williams_headloss, m)?)?;
    m.add_function(wrap_pyfunction!(solve_steady_state, m)?)?;
    m.add_function(wrap_pyfunction!(generate_demands, m)?)?;
    m.add_function(wrap_pyfunction!(conformal_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(prediction_interval, m)?)?;
    m.add_function(wrap_pyfunction!(select_top_uncertain, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_demands, m)?)?;
    m.add_function(wrap_pyfunction!(train_forecaster, m)?)?;
    m.add_function(wrap_pyfunction!(run_adaptive_twin, m)?)?;
    Ok(())
}
