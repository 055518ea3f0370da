//! Server-side aggregation strategies.
//!
//! All strategies read client updates in ascending `client_id` order so the
//! floating-point summation order, and therefore the output bits, do not depend
//! on arrival order. Adaptive strategies consume pseudo-gradients
//! (`broadcast - local`) and take a descent step from the current model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ClientUpdate, GlobalModel, ParameterVector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregationError {
    #[error("no updates to aggregate")]
    EmptyInput,
    #[error("update from {client_id} has dimension {got}, model has {expected}")]
    DimensionMismatch {
        client_id: String,
        expected: usize,
        got: usize,
    },
    #[error("update from {client_id} is for round {got}, model is at round {expected}")]
    RoundMismatch {
        client_id: String,
        expected: u64,
        got: u64,
    },
    #[error("optimizer state has dimension {got}, model has {expected}")]
    StateMismatch { expected: usize, got: usize },
    #[error("invalid aggregator config: {0}")]
    InvalidConfig(String),
    #[error("aggregation produced a non-finite weight at index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    FedAvg,
    FedAvgM,
    FedAdaGrad,
    FedYogi,
    FedAdam,
}

/// How FedAvg turns client weights into the next model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    /// New model is the sample-weighted mean of client weights.
    Replace,
    /// New model is the current model plus `eta` times the sample-weighted mean
    /// of client deltas (`local - broadcast`).
    Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "AggregatorSpec")]
pub struct AggregatorConfig {
    pub strategy: Strategy,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
    pub update_mode: UpdateMode,
}

/// Serialized form with every field optional. A missing `eta` defaults per
/// strategy: 1.0 for FedAvg, 0.1 for the adaptive optimizers.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AggregatorSpec {
    #[serde(default = "fed_avg_strategy")]
    strategy: Strategy,
    eta: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    momentum: Option<f64>,
    update_mode: Option<UpdateMode>,
}

fn fed_avg_strategy() -> Strategy {
    Strategy::FedAvg
}

impl From<AggregatorSpec> for AggregatorConfig {
    fn from(s: AggregatorSpec) -> Self {
        let base = match s.strategy {
            Strategy::FedAvg => Self::fed_avg(),
            other => Self::adaptive(other),
        };
        Self {
            strategy: s.strategy,
            eta: s.eta.unwrap_or(base.eta),
            beta1: s.beta1.unwrap_or(base.beta1),
            beta2: s.beta2.unwrap_or(base.beta2),
            epsilon: s.epsilon.unwrap_or(base.epsilon),
            momentum: s.momentum.unwrap_or(base.momentum),
            update_mode: s.update_mode.unwrap_or(base.update_mode),
        }
    }
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self::fed_avg()
    }
}

impl AggregatorConfig {
    pub fn fed_avg() -> Self {
        Self {
            strategy: Strategy::FedAvg,
            eta: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-3,
            momentum: 0.9,
            update_mode: UpdateMode::Replace,
        }
    }

    /// FedAvg stepping along the weighted client delta with `eta = 1`.
    pub fn fed_avg_delta() -> Self {
        Self {
            update_mode: UpdateMode::Delta,
            ..Self::fed_avg()
        }
    }

    /// Adaptive strategy with the default server hyperparameters.
    pub fn adaptive(strategy: Strategy) -> Self {
        Self {
            strategy,
            eta: 0.1,
            ..Self::fed_avg()
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let bad = |msg: &str| Err(AggregationError::InvalidConfig(msg.to_string()));
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1 must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta2) {
            return bad("beta2 must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.update_mode == UpdateMode::Delta && self.strategy != Strategy::FedAvg {
            return bad("delta update mode applies to FedAvg only");
        }
        Ok(())
    }
}

/// Optimizer state owned by one server. Only the vectors the strategy needs
/// are present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AggregatorState {
    pub velocity: Option<ParameterVector>,
    pub accumulator: Option<ParameterVector>,
    pub moment1: Option<ParameterVector>,
    pub moment2: Option<ParameterVector>,
    pub round: u64,
}

pub fn reset_state(config: &AggregatorConfig, dim: usize) -> AggregatorState {
    let zeros = || Some(ParameterVector::zeros(dim));
    let mut state = AggregatorState::default();
    match config.strategy {
        Strategy::FedAvg => {}
        Strategy::FedAvgM => state.velocity = zeros(),
        Strategy::FedAdaGrad => state.accumulator = zeros(),
        Strategy::FedYogi | Strategy::FedAdam => {
            state.moment1 = zeros();
            state.moment2 = zeros();
        }
    }
    state
}

/// Produces the next global model and optimizer state from one round of
/// client updates. Pure: the inputs are not modified.
pub fn aggregate(
    config: &AggregatorConfig,
    state: &AggregatorState,
    current: &GlobalModel,
    updates: &[ClientUpdate],
) -> Result<(GlobalModel, AggregatorState), AggregationError> {
    config.validate()?;
    if updates.is_empty() {
        return Err(AggregationError::EmptyInput);
    }
    let dim = current.dim();
    for u in updates {
        if u.dim() != dim {
            return Err(AggregationError::DimensionMismatch {
                client_id: u.client_id().to_string(),
                expected: dim,
                got: u.dim(),
            });
        }
        if u.round() != current.round {
            return Err(AggregationError::RoundMismatch {
                client_id: u.client_id().to_string(),
                expected: current.round,
                got: u.round(),
            });
        }
    }

    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id().cmp(b.client_id()));

    let w = current.weights.as_slice();
    let mut next = state.clone();
    next.round += 1;

    let weights: Vec<f64> = match config.strategy {
        Strategy::FedAvg => match config.update_mode {
            UpdateMode::Replace => sample_weighted(&sorted, |u| u.weights()),
            UpdateMode::Delta => {
                let g = sample_weighted(&sorted, |u| u.pseudo_gradient());
                w.iter().zip(&g).map(|(x, gi)| x + config.eta * -gi).collect()
            }
        },
        Strategy::FedAvgM => {
            let g = uniform_sum(&sorted);
            let c = sorted.len() as f64;
            let prev = state_vec(&state.velocity, dim)?;
            let v: Vec<f64> = prev
                .iter()
                .zip(&g)
                .map(|(v, gi)| config.momentum * v + config.eta / c * gi)
                .collect();
            let out = w.iter().zip(&v).map(|(x, vi)| x - vi).collect();
            next.velocity = Some(finite(v)?);
            out
        }
        Strategy::FedAdaGrad => {
            let c = sorted.len() as f64;
            let g: Vec<f64> = uniform_sum(&sorted).into_iter().map(|s| s / c).collect();
            let prev = state_vec(&state.accumulator, dim)?;
            let acc: Vec<f64> = prev.iter().zip(&g).map(|(a, gi)| a + gi * gi).collect();
            let out = w
                .iter()
                .zip(&g)
                .zip(&acc)
                .map(|((x, gi), a)| x - config.eta * ratio(*gi, a.sqrt() + config.epsilon))
                .collect();
            next.accumulator = Some(finite(acc)?);
            out
        }
        Strategy::FedYogi | Strategy::FedAdam => {
            let g = sample_weighted(&sorted, |u| u.pseudo_gradient());
            let m_prev = state_vec(&state.moment1, dim)?;
            let v_prev = state_vec(&state.moment2, dim)?;
            let m: Vec<f64> = m_prev
                .iter()
                .zip(&g)
                .map(|(m, gi)| config.beta1 * m + (1.0 - config.beta1) * gi)
                .collect();
            let v: Vec<f64> = v_prev
                .iter()
                .zip(&g)
                .map(|(v, gi)| {
                    let g2 = gi * gi;
                    if config.strategy == Strategy::FedAdam {
                        config.beta2 * v + (1.0 - config.beta2) * g2
                    } else {
                        v - (1.0 - config.beta2) * g2 * sign(v - g2)
                    }
                })
                .collect();
            let out = w
                .iter()
                .zip(&m)
                .zip(&v)
                .map(|((x, mi), vi)| x - config.eta * ratio(*mi, vi.sqrt() + config.epsilon))
                .collect();
            next.moment1 = Some(finite(m)?);
            next.moment2 = Some(finite(v)?);
            out
        }
    };

    let model = GlobalModel {
        server_id: current.server_id.clone(),
        round: current.round + 1,
        weights: finite(weights)?,
    };
    Ok((model, next))
}

/// `Σ (n_i / N) · field(u_i)` in the given order.
fn sample_weighted<'a>(
    updates: &[&'a ClientUpdate],
    field: impl Fn(&'a ClientUpdate) -> &'a ParameterVector,
) -> Vec<f64> {
    let total: u64 = updates.iter().map(|u| u.sample_count()).sum();
    let total = total as f64;
    let mut acc = vec![0.0; updates[0].dim()];
    for u in updates {
        let share = u.sample_count() as f64 / total;
        for (a, x) in acc.iter_mut().zip(field(u).iter()) {
            *a += share * x;
        }
    }
    acc
}

/// `Σ g_i` in the given order.
fn uniform_sum(updates: &[&ClientUpdate]) -> Vec<f64> {
    let mut acc = vec![0.0; updates[0].dim()];
    for u in updates {
        for (a, g) in acc.iter_mut().zip(u.pseudo_gradient().iter()) {
            *a += g;
        }
    }
    acc
}

fn state_vec(v: &Option<ParameterVector>, dim: usize) -> Result<Vec<f64>, AggregationError> {
    match v {
        None => Ok(vec![0.0; dim]),
        Some(v) if v.dim() == dim => Ok(v.as_slice().to_vec()),
        Some(v) => Err(AggregationError::StateMismatch {
            expected: dim,
            got: v.dim(),
        }),
    }
}

// 0/0 only arises when the numerator is an exactly-zero gradient with a zero
// floor; that step is zero.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn finite(v: Vec<f64>) -> Result<ParameterVector, AggregationError> {
    ParameterVector::new(v).map_err(|e| match e {
        crate::params::ParamError::NonFinite { index } => AggregationError::NonFinite { index },
        other => AggregationError::InvalidConfig(other.to_string()),
    })
}
