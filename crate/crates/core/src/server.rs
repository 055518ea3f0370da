//! The global server loop: serve the current model, collect one update per
//! expected client, aggregate, evaluate, repeat.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{aggregate, reset_state, AggregationError, AggregatorConfig};
use crate::data::ClientDataset;
use crate::params::{ClientUpdate, GlobalModel};
use crate::trainer::{evaluate, TrainError};
use crate::transport::{Connection, Envelope, ListenEvent, Listener, Payload};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ServerError {
    #[error("invalid server config: {0}")]
    InvalidConfig(String),
    #[error("initial model has dimension {got}, eval data needs {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Eval(#[from] TrainError),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub id: String,
    pub aggregator: AggregatorConfig,
    pub expected_clients: Vec<String>,
    pub quorum: usize,
    pub rounds: u64,
    pub round_timeout: Duration,
    pub eval_dataset: ClientDataset,
}

impl ServerConfig {
    /// Quorum defaults to the whole cohort.
    pub fn new(
        id: impl Into<String>,
        aggregator: AggregatorConfig,
        expected_clients: Vec<String>,
        eval_dataset: ClientDataset,
    ) -> Self {
        Self {
            id: id.into(),
            aggregator,
            quorum: expected_clients.len(),
            expected_clients,
            rounds: 3,
            round_timeout: Duration::from_secs(30),
            eval_dataset,
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        let bad = |m: String| Err(ServerError::InvalidConfig(m));
        if self.expected_clients.is_empty() {
            return bad(format!("{} expects no clients", self.id));
        }
        let unique: BTreeSet<_> = self.expected_clients.iter().collect();
        if unique.len() != self.expected_clients.len() {
            return bad(format!("{} lists a client twice", self.id));
        }
        if self.quorum == 0 || self.quorum > self.expected_clients.len() {
            return bad(format!(
                "quorum {} outside 1..={}",
                self.quorum,
                self.expected_clients.len()
            ));
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        self.aggregator.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundStatus {
    Aggregated,
    /// Too few updates by the deadline; the model was carried forward.
    QuorumNotMet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub participants: Vec<String>,
    pub eval_loss: f64,
    pub aggregated_at: DateTime<Utc>,
    pub status: RoundStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRun {
    pub records: Vec<RoundRecord>,
    pub final_model: GlobalModel,
}

/// `(round, eval_loss)` pairs in ascending round order.
pub fn eval_history(records: &[RoundRecord]) -> Vec<(u64, f64)> {
    let mut out: Vec<_> = records.iter().map(|r| (r.round, r.eval_loss)).collect();
    out.sort_by_key(|&(round, _)| round);
    out
}

type Parked = (Box<dyn Connection>, Envelope);

struct Loop<'a> {
    config: &'a ServerConfig,
    expected: BTreeSet<&'a str>,
    model: GlobalModel,
    pending: BTreeMap<String, ClientUpdate>,
    parked: Vec<Parked>,
}

impl Loop<'_> {
    fn reply(&self, conn: &mut Box<dyn Connection>, e: Envelope) {
        if let Err(err) = conn.send(&e) {
            log::warn!("{}: reply failed: {err}", self.config.id);
        }
    }

    fn refuse(&self, conn: &mut Box<dyn Connection>, code: &str, message: String) {
        log::debug!("{}: {code}: {message}", self.config.id);
        let e = Envelope::error(self.model.round, &self.config.id, code, message);
        self.reply(conn, e);
    }

    /// Handles one request; requests for a round the model has not reached
    /// yet are parked until it has.
    fn handle(&mut self, mut conn: Box<dyn Connection>, req: Envelope) {
        let current = self.model.round;
        match &req.payload {
            Payload::Hello if req.round > current => self.parked.push((conn, req)),
            Payload::Hello => {
                let e = Envelope::new(current, &self.config.id, Payload::ModelBroadcast(self.model.clone()));
                self.reply(&mut conn, e);
            }
            Payload::Update(u) => {
                if !self.expected.contains(u.client_id()) {
                    let m = format!("{} is not in this server's cohort", u.client_id());
                    return self.refuse(&mut conn, "not-expected", m);
                }
                if u.round() < current {
                    let m = format!("update for round {} but model is at {current}", u.round());
                    return self.refuse(&mut conn, "stale-round", m);
                }
                if u.round() > current {
                    return self.parked.push((conn, req));
                }
                if u.dim() != self.model.dim() {
                    let m = format!("dimension {} but model has {}", u.dim(), self.model.dim());
                    return self.refuse(&mut conn, "dimension-mismatch", m);
                }
                let Payload::Update(u) = req.payload else { unreachable!() };
                if self.pending.insert(u.client_id().to_string(), u).is_some() {
                    log::warn!("{}: duplicate update from {} in round {current}; keeping the latest", self.config.id, req.sender);
                }
                let ack = Envelope::new(current, &self.config.id, Payload::Ack);
                self.reply(&mut conn, ack);
            }
            _ => {
                let m = format!("servers do not accept {:?} envelopes", req.kind());
                self.refuse(&mut conn, "unexpected-kind", m);
            }
        }
    }

    fn replay_parked(&mut self) {
        for (conn, req) in std::mem::take(&mut self.parked) {
            self.handle(conn, req);
        }
    }
}

/// Runs `config.rounds` rounds. Each round closes as soon as every expected
/// client has reported, or at the listener's deadline if at least `quorum`
/// have. Otherwise the round is recorded as [`RoundStatus::QuorumNotMet`]
/// and the model is carried into the next round unchanged.
pub fn run_server(
    config: &ServerConfig,
    initial: GlobalModel,
    listener: &mut dyn Listener,
) -> Result<ServerRun, ServerError> {
    config.validate()?;
    let dim = config.eval_dataset.feature_count() + 1;
    if initial.dim() != dim {
        return Err(ServerError::DimensionMismatch {
            expected: dim,
            got: initial.dim(),
        });
    }
    let mut state = reset_state(&config.aggregator, dim);
    let mut lp = Loop {
        config,
        expected: config.expected_clients.iter().map(String::as_str).collect(),
        model: GlobalModel {
            server_id: config.id.clone(),
            ..initial
        },
        pending: BTreeMap::new(),
        parked: Vec::new(),
    };
    let mut records = Vec::with_capacity(config.rounds as usize);

    for round in 1..=config.rounds {
        lp.replay_parked();
        while lp.pending.len() < lp.expected.len() {
            match listener.next(round, config.round_timeout) {
                ListenEvent::Incoming(mut conn) => match conn.recv() {
                    Ok(req) => lp.handle(conn, req),
                    Err(e) => log::warn!("{}: discarding frame: {e}", config.id),
                },
                ListenEvent::Deadline | ListenEvent::Closed => break,
            }
        }

        let updates: Vec<ClientUpdate> = std::mem::take(&mut lp.pending).into_values().collect();
        let participants: Vec<String> = updates.iter().map(|u| u.client_id().to_string()).collect();
        let status = if updates.len() >= config.quorum {
            let (next, next_state) = aggregate(&config.aggregator, &state, &lp.model, &updates)?;
            lp.model = next;
            state = next_state;
            RoundStatus::Aggregated
        } else {
            log::warn!(
                "{}: round {round} closed with {} of {} required updates",
                config.id,
                updates.len(),
                config.quorum
            );
            lp.model.round += 1;
            RoundStatus::QuorumNotMet
        };
        let eval_loss = evaluate(&lp.model.weights, &config.eval_dataset)?;
        records.push(RoundRecord {
            round,
            participants: if status == RoundStatus::Aggregated { participants } else { Vec::new() },
            eval_loss,
            aggregated_at: listener.timestamp(round),
            status,
        });
    }

    for (mut conn, req) in std::mem::take(&mut lp.parked) {
        let m = format!("server finished after round {}", config.rounds);
        let e = Envelope::error(req.round, &config.id, "finished", m);
        let _ = conn.send(&e);
    }
    Ok(ServerRun {
        records,
        final_model: lp.model,
    })
}
