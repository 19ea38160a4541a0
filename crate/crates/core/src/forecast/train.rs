//! Training loop for per-node models: window extraction, Adam, early
//! stopping, and the finite-difference gradient check.

use rand::RngExt;
use thiserror::Error;

use super::lstm::{self, ParamLayout};
use super::{forward_fill, EpochLog, ForecastModel, LstmHyperparams};
use crate::seeding::{stream_rng, tags};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("need at least {needed} training windows, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("unsupported hyperparameters: {0}")]
    InvalidHyper(String),
}

struct Window {
    input: Vec<f64>,
    target: f64,
}

fn extract_windows(series_per_scenario: &[Vec<f64>], lookback: usize) -> Vec<Window> {
    let mut windows = Vec::new();
    for series in series_per_scenario {
        let series = forward_fill(series);
        for t in lookback..series.len() {
            windows.push(Window {
                input: series[t - lookback..t].to_vec(),
                target: series[t],
            });
        }
    }
    windows
}

fn xavier_init(layout: &ParamLayout, hyper: &LstmHyperparams, node_tag: u64) -> Vec<f64> {
    let mut rng = stream_rng(hyper.seed, &[tags::MODEL_INIT, node_tag]);
    let d = layout.hidden;
    let mut params = vec![0.0; layout.total];
    let mut fill = |range: std::ops::Range<usize>, fan_in: usize, fan_out: usize,
                    params: &mut Vec<f64>| {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for p in &mut params[range] {
            *p = rng.random_range(-bound..bound);
        }
    };
    fill(layout.wx0.clone(), 1, d, &mut params);
    fill(layout.wh0.clone(), d, d, &mut params);
    fill(layout.wx1.clone(), d, d, &mut params);
    fill(layout.wh1.clone(), d, d, &mut params);
    fill(layout.w_out.clone(), d, 1, &mut params);
    // Forget-gate biases start at 1 so early training does not wipe the
    // cell state; other biases start at zero.
    for j in 0..d {
        params[layout.b0.start + d + j] = 1.0;
        params[layout.b1.start + d + j] = 1.0;
    }
    params
}

/// Loss and gradient of `(output_std - target_std)^2 + l2 * |params|^2`
/// for a single window, in standardized space. Dropout masks, when given,
/// are applied between the layers (training mode).
pub fn loss_and_gradient(
    model: &ForecastModel,
    window: &[f64],
    target: f64,
    dropout_masks: Option<&[Vec<f64>]>,
) -> (f64, Vec<f64>) {
    let layout = model.layout();
    let window_std: Vec<f64> = window.iter().map(|v| model.standardize(*v)).collect();
    let target_std = model.standardize(target);
    let pass = lstm::forward(&layout, &model.params, &window_std, dropout_masks, true);
    let err = pass.output_std - target_std;
    let l2 = model.hyper.l2_penalty;
    let loss = err * err + l2 * model.params.iter().map(|p| p * p).sum::<f64>();
    let mut grads = vec![0.0; layout.total];
    lstm::backward(&layout, &model.params, &pass, 2.0 * err, &mut grads);
    for (g, p) in grads.iter_mut().zip(&model.params) {
        *g += 2.0 * l2 * p;
    }
    (loss, grads)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - Self::BETA1.powi(self.step as i32);
        let b2t = 1.0 - Self::BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Trains one junction's model on its training-scenario series.
///
/// Windows are standardized with the training mean/std, shuffled into a
/// 90/10 train/validation split, and optimized with Adam until the
/// validation MSE stops improving for `patience` epochs. The returned
/// parameters are from the best validation epoch. Deterministic per
/// (seed, node_tag).
pub fn train_node_model(
    series_per_scenario: &[Vec<f64>],
    hyper: &LstmHyperparams,
    label: &str,
    node_tag: u64,
) -> Result<ForecastModel, TrainError> {
    if hyper.layers != 2 {
        return Err(TrainError::InvalidHyper(format!(
            "layers = {}, only 2 supported",
            hyper.layers
        )));
    }
    if !(0.0..1.0).contains(&hyper.dropout) {
        return Err(TrainError::InvalidHyper(format!(
            "dropout = {} outside [0, 1)",
            hyper.dropout
        )));
    }
    let windows = extract_windows(series_per_scenario, hyper.lookback);
    let needed = 2 * hyper.batch_size;
    if windows.len() < needed {
        return Err(TrainError::InsufficientData {
            needed,
            have: windows.len(),
        });
    }

    // Standardization over the raw training series.
    let all: Vec<f64> = series_per_scenario
        .iter()
        .flat_map(|s| forward_fill(s))
        .collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt().max(1e-9);

    let layout = ParamLayout::new(hyper.hidden);
    let mut model = ForecastModel {
        label: label.to_string(),
        hyper: *hyper,
        mean,
        std,
        params: xavier_init(&layout, hyper, node_tag),
        train_log: Vec::new(),
    };

    // 90/10 split of shuffled window indices; validation gets at least one.
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut shuffle_rng = stream_rng(hyper.seed, &[tags::TRAIN_SHUFFLE, node_tag]);
    fisher_yates(&mut order, &mut shuffle_rng);
    let n_val = (windows.len() / 10).max(1);
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut dropout_rng = stream_rng(hyper.seed, &[tags::DROPOUT, node_tag]);
    let keep = 1.0 - hyper.dropout;
    let mut adam = Adam::new(layout.total);
    let mut best_val = f64::INFINITY;
    let mut best_params = model.params.clone();
    let mut epochs_since_best = 0;
    let mut train_order: Vec<usize> = train_idx.to_vec();

    for epoch in 0..hyper.max_epochs {
        fisher_yates(&mut train_order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in train_order.chunks(hyper.batch_size) {
            let mut grads = vec![0.0; layout.total];
            let mut batch_loss = 0.0;
            for &wi in batch {
                let w = &windows[wi];
                let masks: Vec<Vec<f64>> = (0..hyper.lookback)
                    .map(|_| {
                        (0..hyper.hidden)
                            .map(|_| {
                                if hyper.dropout == 0.0 || dropout_rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                let (loss, g) = loss_and_gradient(&model, &w.input, w.target, Some(&masks));
                batch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    *acc += gi;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut() {
                *g *= scale;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            adam.update(&mut model.params, &grads, hyper.learning_rate);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;

        let mut val_mse = 0.0;
        for &wi in val_idx {
            let w = &windows[wi];
            let pred_std = model.standardize(model.forward_eval(&w.input).expect("window shape"));
            let err = pred_std - model.standardize(w.target);
            val_mse += err * err;
        }
        val_mse /= val_idx.len() as f64;
        if !val_mse.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        model.train_log.push(EpochLog {
            epoch,
            train_loss,
            val_loss: val_mse,
        });

        if val_mse < best_val {
            best_val = val_mse;
            best_params.copy_from_slice(&model.params);
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= hyper.patience {
                break;
            }
        }
    }

    model.params = best_params;
    Ok(model)
}

fn fisher_yates<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Compares analytic gradients against central finite differences
/// (step 1e-5) over an evenly spread subset of parameters; returns the
/// maximum relative error. Dropout is disabled (evaluation-mode graph).
pub fn gradient_check(model: &ForecastModel, window: &[f64], target: f64) -> f64 {
    let (_, analytic) = loss_and_gradient(model, window, target, None);
    let layout = model.layout();
    let n_probe = layout.total.min(48);
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..n_probe {
        let idx = k * layout.total / n_probe;
        let mut probe = model.clone();
        probe.params[idx] += step;
        let (up, _) = loss_and_gradient(&probe, window, target, None);
        probe.params[idx] -= 2.0 * step;
        let (down, _) = loss_and_gradient(&probe, window, target, None);
        let numeric = (up - down) / (2.0 * step);
        let denom = analytic[idx].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[idx] - numeric).abs() / denom);
    }
    worst
}
