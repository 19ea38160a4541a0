//! Digital-twin simulator for water distribution networks with
//! conformal-prediction-guided adaptive sensor sampling.
//!
//! The crate is organized around the closed loop it simulates:
//!
//! - [`network`]: network graph model and EPANET-style INP text parsing.
//! - [`hydraulics`]: demand-driven steady-state solver (global gradient
//!   method with Hazen-Williams headloss).
//! - [`scenario`]: synthetic multi-scenario demand generation and
//!   measurement-noise injection.
//! - [`forecast`]: per-node LSTM demand forecasters trained from scratch
//!   (BPTT + Adam + early stopping), plus a moving-average baseline.
//! - [`conformal`]: split conformal calibration producing per-node
//!   residual quantiles and prediction intervals.
//! - [`sampling`]: sampling policies, measurement/prediction fusion, and
//!   the closed-loop twin driver.
//! - [`metrics`]: evaluation metrics over twin trajectories.
//! - [`cli`]: experiment configuration and the pipeline commands behind
//!   the `aquatwin` binary.

pub mod cli;
pub mod conformal;
pub mod forecast;
pub mod hydraulics;
pub mod metrics;
pub mod network;
pub mod sampling;
pub mod scenario;
pub mod seeding;

pub use network::{hanoi_builtin, parse_inp, NetworkModel};
