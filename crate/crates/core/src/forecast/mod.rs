//! Per-node demand forecasting.
//!
//! Every junction gets its own two-layer LSTM trained from scratch on the
//! training-split scenarios (standardized inputs, MSE + L2 loss, Adam,
//! early stopping on a held-out window split). A seasonal moving-average
//! forecaster is available as the ablation baseline.

mod lstm;
mod train;

pub use lstm::ParamLayout;
pub use train::{gradient_check, loss_and_gradient, train_node_model, TrainError};

use serde::{Deserialize, Serialize};

/// Hyperparameters of the per-node LSTM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmHyperparams {
    /// Lookback window length in hours.
    pub lookback: usize,
    /// Number of stacked LSTM layers; only 2 is supported.
    pub layers: usize,
    /// Hidden units per layer.
    pub hidden: usize,
    /// Inverted-dropout probability between the two layers.
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs without validation improvement.
    pub patience: usize,
    pub l2_penalty: f64,
    pub seed: u64,
}

impl Default for LstmHyperparams {
    fn default() -> Self {
        LstmHyperparams {
            lookback: 24,
            layers: 2,
            hidden: 16,
            dropout: 0.2,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            l2_penalty: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss (standardized MSE + L2 term).
    pub train_loss: f64,
    /// Validation MSE in standardized space.
    pub val_loss: f64,
}

/// A trained per-node forecaster: flat parameters plus the normalization
/// used to standardize its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    /// Label of the junction this model forecasts.
    pub label: String,
    pub hyper: LstmHyperparams,
    /// Training-split mean of the node's demand, L/s.
    pub mean: f64,
    /// Training-split standard deviation (floored at 1e-9), L/s.
    pub std: f64,
    pub params: Vec<f64>,
    pub train_log: Vec<EpochLog>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ForecastError {
    #[error("window has {got} values, model lookback is {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

impl ForecastModel {
    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(self.hyper.hidden)
    }

    pub fn standardize(&self, value: f64) -> f64 {
        (value - self.mean) / self.std
    }

    pub fn destandardize(&self, value_std: f64) -> f64 {
        value_std * self.std + self.mean
    }

    /// Evaluation-mode forward pass: standardized window through the
    /// recurrence, linear head, de-standardize, clamp at zero so demands
    /// stay non-negative. Deterministic.
    pub fn forward_eval(&self, window: &[f64]) -> Result<f64, ForecastError> {
        if window.len() != self.hyper.lookback {
            return Err(ForecastError::ShapeMismatch {
                expected: self.hyper.lookback,
                got: window.len(),
            });
        }
        let window_std: Vec<f64> = window.iter().map(|v| self.standardize(*v)).collect();
        let pass = lstm::forward(&self.layout(), &self.params, &window_std, None, false);
        Ok(self.destandardize(pass.output_std).max(0.0))
    }

    /// Forecast from the latest `lookback` values of `history` (which may
    /// mix true and fused values during closed-loop operation).
    pub fn predict(&self, history: &[f64]) -> Result<f64, ForecastError> {
        if history.len() < self.hyper.lookback {
            return Err(ForecastError::ShapeMismatch {
                expected: self.hyper.lookback,
                got: history.len(),
            });
        }
        self.forward_eval(&history[history.len() - self.hyper.lookback..])
    }

    pub fn to_json(&self) -> String {
        // Archive schema: segment shapes + flat decimal parameters, kept
        // binary-free and portable.
        let layout = self.layout();
        let shapes: Vec<serde_json::Value> = layout
            .segments()
            .iter()
            .map(|(name, shape)| serde_json::json!({ "name": name, "shape": shape }))
            .collect();
        let doc = serde_json::json!({
            "label": self.label,
            "hyper": self.hyper,
            "normalization": { "mean": self.mean, "std": self.std },
            "shapes": shapes,
            "params": self.params,
            "train_log": self.train_log,
        });
        serde_json::to_string_pretty(&doc).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Norm {
            mean: f64,
            std: f64,
        }
        #[derive(Deserialize)]
        struct Doc {
            label: String,
            hyper: LstmHyperparams,
            normalization: Norm,
            params: Vec<f64>,
            train_log: Vec<EpochLog>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(ForecastModel {
            label: doc.label,
            hyper: doc.hyper,
            mean: doc.normalization.mean,
            std: doc.normalization.std,
            params: doc.params,
            train_log: doc.train_log,
        })
    }
}

/// Forward-fill non-finite entries; a leading gap takes the first finite
/// value (zero if none).
pub fn forward_fill(series: &[f64]) -> Vec<f64> {
    let first = series.iter().copied().find(|v| v.is_finite()).unwrap_or(0.0);
    let mut last = first;
    series
        .iter()
        .map(|&v| {
            if v.is_finite() {
                last = v;
                v
            } else {
                last
            }
        })
        .collect()
}

/// Per-node forecaster bank drive by the twin loop.
pub trait PredictorBank: Sync {
    /// History length required before the first prediction.
    fn lookback(&self) -> usize;
    /// Point forecast for junction `node` from the latest values of its
    /// (possibly fused) history.
    fn predict(&self, node: usize, history: &[f64]) -> f64;
}

/// One trained LSTM per junction, in junction order.
pub struct LstmBank {
    pub models: Vec<ForecastModel>,
}

impl PredictorBank for LstmBank {
    fn lookback(&self) -> usize {
        self.models.iter().map(|m| m.hyper.lookback).max().unwrap_or(0)
    }

    fn predict(&self, node: usize, history: &[f64]) -> f64 {
        self.models[node]
            .predict(history)
            .expect("history shorter than lookback")
    }
}

/// Seasonal moving-average baseline: the forecast for hour t is the mean
/// of the values at the same hour over the prior `days` days.
pub struct MovingAverageBank {
    pub days: usize,
    pub period: usize,
}

impl Default for MovingAverageBank {
    fn default() -> Self {
        // 7-day hour-matched mean.
        MovingAverageBank { days: 7, period: 24 }
    }
}

impl PredictorBank for MovingAverageBank {
    fn lookback(&self) -> usize {
        self.days * self.period
    }

    fn predict(&self, _node: usize, history: &[f64]) -> f64 {
        let n = history.len();
        let mut acc = 0.0;
        for k in 1..=self.days {
            acc += history[n - k * self.period];
        }
        (acc / self.days as f64).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(mean: f64) -> ForecastModel {
        let hyper = LstmHyperparams {
            hidden: 4,
            ..LstmHyperparams::default()
        };
        let layout = ParamLayout::new(hyper.hidden);
        ForecastModel {
            label: "J".into(),
            hyper,
            mean,
            std: 1.0,
            params: vec![0.0; layout.total],
            train_log: Vec::new(),
        }
    }

    #[test]
    fn zero_parameters_predict_the_clamped_mean() {
        let window = vec![5.0; 24];
        assert_eq!(zero_model(3.5).forward_eval(&window).unwrap(), 3.5);
        // A negative mean clamps to zero.
        assert_eq!(zero_model(-2.0).forward_eval(&window).unwrap(), 0.0);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let model = zero_model(1.0);
        let window: Vec<f64> = (0..24).map(|t| t as f64).collect();
        assert_eq!(
            model.forward_eval(&window).unwrap(),
            model.forward_eval(&window).unwrap()
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = zero_model(1.0);
        assert_eq!(
            model.forward_eval(&[1.0; 7]).unwrap_err(),
            ForecastError::ShapeMismatch {
                expected: 24,
                got: 7
            }
        );
    }

    #[test]
    fn standardization_round_trips() {
        let mut model = zero_model(0.0);
        model.mean = 17.3;
        model.std = 4.2;
        for v in [0.0, 1.0, -12.5, 400.75] {
            let rt = model.destandardize(model.standardize(v));
            assert!((rt - v).abs() < 1e-12);
        }
    }

    #[test]
    fn model_json_round_trips() {
        let mut model = zero_model(9.0);
        model.params.iter_mut().enumerate().for_each(|(k, p)| {
            *p = (k as f64 * 0.31).sin() / 7.0;
        });
        model.train_log.push(EpochLog {
            epoch: 0,
            train_loss: 0.5,
            val_loss: 0.25,
        });
        let text = model.to_json();
        let back = ForecastModel::from_json(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn forward_fill_replaces_gaps() {
        let filled = forward_fill(&[f64::NAN, 1.0, f64::NAN, f64::NAN, 4.0]);
        assert_eq!(filled, vec![1.0, 1.0, 1.0, 1.0, 4.0]);
    }

    #[test]
    fn moving_average_takes_hour_matched_mean() {
        let bank = MovingAverageBank::default();
        // History where hour-of-day h always has value h on day k offset k.
        let mut history = Vec::new();
        for day in 0..8 {
            for hour in 0..24 {
                history.push((hour + day) as f64);
            }
        }
        // Prediction looks back at positions len-24k: values for k=1..7.
        let n = history.len();
        let expect: f64 =
            (1..=7).map(|k| history[n - k * 24]).sum::<f64>() / 7.0;
        assert_eq!(bank.predict(0, &history), expect);
    }
}
