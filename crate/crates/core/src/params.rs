//! Parameter vectors and the values exchanged between clients and servers.
//!
//! Every vector is flat, 64-bit and finite. Non-finite values are rejected at
//! construction so a poisoned update can never reach a global model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("division by zero at index {index}")]
    DivisionByZero { index: usize },
    #[error("scalar is not finite: {0}")]
    NonFiniteScalar(f64),
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("parameter vector must have at least one element")]
    Empty,
    #[error("empty input")]
    EmptyInput,
    #[error("weight must be positive and finite, got {0}")]
    InvalidWeight(f64),
    #[error("sample count must be at least 1")]
    ZeroSamples,
}

/// Ordered, fixed-length list of finite model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ParamError> {
        if values.is_empty() {
            return Err(ParamError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite { index });
        }
        Ok(Self(values))
    }

    /// # Panics
    ///
    /// Panics if `dim` is zero.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector dimension must be positive");
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    fn check_dim(&self, other: &Self) -> Result<(), ParamError> {
        if self.dim() != other.dim() {
            return Err(ParamError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = ParamError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(v: ParameterVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for ParameterVector {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.0[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

/// Elementwise `a op b`.
pub fn vec_combine(
    a: &ParameterVector,
    b: &ParameterVector,
    op: Op,
) -> Result<ParameterVector, ParamError> {
    a.check_dim(b)?;
    if op == Op::Div {
        if let Some(index) = b.iter().position(|&v| v == 0.0) {
            return Err(ParamError::DivisionByZero { index });
        }
    }
    let values = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| match op {
            Op::Add => x + y,
            Op::Sub => x - y,
            Op::Mul => x * y,
            Op::Div => x / y,
        })
        .collect();
    ParameterVector::new(values)
}

pub fn vec_scale(a: &ParameterVector, s: f64) -> Result<ParameterVector, ParamError> {
    if !s.is_finite() {
        return Err(ParamError::NonFiniteScalar(s));
    }
    ParameterVector::new(a.iter().map(|&x| s * x).collect())
}

/// `Σ (weight_i / Σ weights) · vector_i`, computed as a running mean in input
/// order so that a set of identical vectors yields that vector exactly.
pub fn weighted_mean(items: &[(ParameterVector, f64)]) -> Result<ParameterVector, ParamError> {
    let (first, _) = items.first().ok_or(ParamError::EmptyInput)?;
    for (v, w) in items {
        first.check_dim(v)?;
        if !(w.is_finite() && *w > 0.0) {
            return Err(ParamError::InvalidWeight(*w));
        }
    }
    let mut acc = first.as_slice().to_vec();
    let mut seen = items[0].1;
    for (v, w) in &items[1..] {
        seen += w;
        let share = w / seen;
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += share * (x - *a);
        }
    }
    ParameterVector::new(acc)
}

/// One client's contribution to a round.
///
/// `pseudo_gradient` is the broadcast model minus the locally trained weights,
/// i.e. the direction the server should descend along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawClientUpdate")]
pub struct ClientUpdate {
    client_id: String,
    round: u64,
    sample_count: u64,
    weights: ParameterVector,
    pseudo_gradient: ParameterVector,
}

#[derive(Deserialize)]
struct RawClientUpdate {
    client_id: String,
    round: u64,
    sample_count: u64,
    weights: ParameterVector,
    pseudo_gradient: ParameterVector,
}

impl TryFrom<RawClientUpdate> for ClientUpdate {
    type Error = ParamError;

    fn try_from(raw: RawClientUpdate) -> Result<Self, Self::Error> {
        Self::from_parts(
            raw.client_id,
            raw.round,
            raw.sample_count,
            raw.weights,
            raw.pseudo_gradient,
        )
    }
}

impl ClientUpdate {
    /// Builds an update from the model the client started from and the weights
    /// it ended with.
    pub fn new(
        client_id: impl Into<String>,
        round: u64,
        sample_count: u64,
        broadcast: &ParameterVector,
        weights: ParameterVector,
    ) -> Result<Self, ParamError> {
        let pseudo_gradient = vec_combine(broadcast, &weights, Op::Sub)?;
        Self::from_parts(client_id, round, sample_count, weights, pseudo_gradient)
    }

    pub fn from_parts(
        client_id: impl Into<String>,
        round: u64,
        sample_count: u64,
        weights: ParameterVector,
        pseudo_gradient: ParameterVector,
    ) -> Result<Self, ParamError> {
        if sample_count == 0 {
            return Err(ParamError::ZeroSamples);
        }
        weights.check_dim(&pseudo_gradient)?;
        Ok(Self {
            client_id: client_id.into(),
            round,
            sample_count,
            weights,
            pseudo_gradient,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn weights(&self) -> &ParameterVector {
        &self.weights
    }

    pub fn pseudo_gradient(&self) -> &ParameterVector {
        &self.pseudo_gradient
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }
}

/// A server's current global model. `round` counts completed rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub server_id: String,
    pub round: u64,
    pub weights: ParameterVector,
}

impl GlobalModel {
    pub fn new(server_id: impl Into<String>, weights: ParameterVector) -> Self {
        Self {
            server_id: server_id.into(),
            round: 0,
            weights,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }
}
