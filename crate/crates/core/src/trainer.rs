//! Local training: linear regression with mean-squared-error loss, fitted by
//! full-batch gradient descent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::ClientDataset;
use crate::params::ParameterVector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("weights have dimension {got}, dataset needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

/// Coefficients plus bias. The flattened form is `[coefficients..., bias]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coefficients: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn from_flat(weights: &ParameterVector) -> Self {
        let (bias, coefficients) = weights.as_slice().split_last().expect("non-empty");
        Self {
            coefficients: coefficients.to_vec(),
            bias: *bias,
        }
    }

    pub fn flatten(&self) -> Result<ParameterVector, crate::params::ParamError> {
        let mut v = self.coefficients.clone();
        v.push(self.bias);
        ParameterVector::new(v)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        predict(&self.coefficients, self.bias, x)
    }
}

fn predict(coef: &[f64], bias: f64, x: &[f64]) -> f64 {
    coef.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + bias
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Reserved for minibatching; full-batch descent does not read it.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_per_epoch: Vec<f64>,
    pub final_weights: ParameterVector,
    pub sample_count: u64,
}

fn check(weights: &[f64], dataset: &ClientDataset) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let expected = dataset.feature_count() + 1;
    if weights.len() != expected {
        return Err(TrainError::DimensionMismatch {
            expected,
            got: weights.len(),
        });
    }
    Ok(())
}

fn mse(w: &[f64], dataset: &ClientDataset) -> f64 {
    let (bias, coef) = w.split_last().expect("checked");
    let sum: f64 = dataset
        .rows()
        .map(|(x, y)| {
            let r = predict(coef, *bias, x) - y;
            r * r
        })
        .sum();
    sum / dataset.len() as f64
}

fn mse_gradient(w: &[f64], dataset: &ClientDataset) -> Vec<f64> {
    let (bias, coef) = w.split_last().expect("checked");
    let mut g = vec![0.0; w.len()];
    let last = coef.len();
    for (x, y) in dataset.rows() {
        let r = predict(coef, *bias, x) - y;
        for (gj, xj) in g.iter_mut().zip(x) {
            *gj += r * xj;
        }
        g[last] += r;
    }
    let k = 2.0 / dataset.len() as f64;
    g.iter_mut().for_each(|v| *v *= k);
    g
}

/// Mean squared error of `weights` over the dataset.
pub fn evaluate(weights: &ParameterVector, dataset: &ClientDataset) -> Result<f64, TrainError> {
    check(weights.as_slice(), dataset)?;
    Ok(mse(weights.as_slice(), dataset))
}

/// Analytic gradient of [`evaluate`] with respect to the flattened weights.
pub fn gradient(
    weights: &ParameterVector,
    dataset: &ClientDataset,
) -> Result<ParameterVector, TrainError> {
    check(weights.as_slice(), dataset)?;
    ParameterVector::new(mse_gradient(weights.as_slice(), dataset))
        .map_err(|_| TrainError::Diverged { epoch: 0 })
}

/// Runs `config.epochs` full-batch gradient steps from `start`, recording the
/// loss after each step.
pub fn train_local(
    start: &ParameterVector,
    dataset: &ClientDataset,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    check(start.as_slice(), dataset)?;
    let mut w = start.as_slice().to_vec();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let g = mse_gradient(&w, dataset);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= config.learning_rate * gi;
        }
        let loss = mse(&w, dataset);
        if !loss.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::Diverged { epoch });
        }
        losses.push(loss);
    }
    Ok(TrainReport {
        loss_per_epoch: losses,
        final_weights: ParameterVector::new(w).map_err(|_| TrainError::Diverged {
            epoch: config.epochs,
        })?,
        sample_count: dataset.len() as u64,
    })
}
