use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Connection, ServerAddress, Transport, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Dials fail immediately.
    Refuse,
    /// The connection opens, but the first frame sent is cut after its
    /// length prefix and the connection is closed.
    DropMidMessage,
}

/// Inclusive range of 1-based protocol rounds. An open `until_round` lasts
/// for the rest of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultWindow {
    pub from_round: u64,
    #[serde(default)]
    pub until_round: Option<u64>,
    pub kind: FaultKind,
}

impl FaultWindow {
    fn covers(&self, round: u64) -> bool {
        round >= self.from_round && self.until_round.is_none_or(|u| round <= u)
    }

    fn end(&self) -> u64 {
        self.until_round.unwrap_or(u64::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultPlanError {
    #[error("server {server}: rounds are 1-based, window starts at {from}")]
    ZeroRound { server: String, from: u64 },
    #[error("server {server}: window ends at {until} before it starts at {from}")]
    Inverted { server: String, from: u64, until: u64 },
    #[error("server {server}: fault windows overlap")]
    Overlap { server: String },
}

/// Per-server fault schedule keyed by server id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, Vec<FaultWindow>>", into = "BTreeMap<String, Vec<FaultWindow>>")]
pub struct FaultPlan {
    servers: BTreeMap<String, Vec<FaultWindow>>,
}

impl TryFrom<BTreeMap<String, Vec<FaultWindow>>> for FaultPlan {
    type Error = FaultPlanError;

    fn try_from(mut servers: BTreeMap<String, Vec<FaultWindow>>) -> Result<Self, Self::Error> {
        for (server, windows) in &mut servers {
            for w in windows.iter() {
                if w.from_round == 0 {
                    return Err(FaultPlanError::ZeroRound { server: server.clone(), from: 0 });
                }
                if let Some(until) = w.until_round.filter(|&u| u < w.from_round) {
                    return Err(FaultPlanError::Inverted {
                        server: server.clone(),
                        from: w.from_round,
                        until,
                    });
                }
            }
            windows.sort_by_key(|w| w.from_round);
            if windows.windows(2).any(|p| p[0].end() >= p[1].from_round) {
                return Err(FaultPlanError::Overlap { server: server.clone() });
            }
        }
        Ok(Self { servers })
    }
}

impl From<FaultPlan> for BTreeMap<String, Vec<FaultWindow>> {
    fn from(p: FaultPlan) -> Self {
        p.servers
    }
}

impl FaultPlan {
    pub fn new(servers: BTreeMap<String, Vec<FaultWindow>>) -> Result<Self, FaultPlanError> {
        Self::try_from(servers)
    }

    /// Adds one window, keeping the plan valid.
    pub fn with(self, server: &str, window: FaultWindow) -> Result<Self, FaultPlanError> {
        let mut servers = self.servers;
        servers.entry(server.to_string()).or_default().push(window);
        Self::try_from(servers)
    }

    /// Refuses every dial to `server` from `round` onwards.
    pub fn refuse_from(server: &str, round: u64) -> Self {
        Self::default()
            .with(
                server,
                FaultWindow {
                    from_round: round,
                    until_round: None,
                    kind: FaultKind::Refuse,
                },
            )
            .expect("single window is valid")
    }

    pub fn is_empty(&self) -> bool {
        self.servers.values().all(Vec::is_empty)
    }

    pub fn fault_at(&self, server: &str, round: u64) -> Option<FaultKind> {
        self.servers
            .get(server)?
            .iter()
            .find(|w| w.covers(round))
            .map(|w| w.kind)
    }
}

/// Wraps a transport so dials follow a [`FaultPlan`].
pub struct FaultyTransport<T> {
    inner: T,
    plan: FaultPlan,
}

pub fn inject<T: Transport>(inner: T, plan: FaultPlan) -> FaultyTransport<T> {
    FaultyTransport { inner, plan }
}

impl<T: Transport> Transport for FaultyTransport<T> {
    fn dial(&self, addr: &ServerAddress, round: u64) -> Result<Box<dyn Connection>, TransportError> {
        match self.plan.fault_at(&addr.id, round) {
            None => self.inner.dial(addr, round),
            Some(FaultKind::Refuse) => Err(TransportError::Refused(format!(
                "{} is down in round {round}",
                addr.id
            ))),
            Some(FaultKind::DropMidMessage) => Ok(Box::new(Truncating {
                inner: Some(self.inner.dial(addr, round)?),
            })),
        }
    }

    fn round_finished(&self, round: u64) {
        self.inner.round_finished(round);
    }
}

struct Truncating {
    inner: Option<Box<dyn Connection>>,
}

impl Connection for Truncating {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        if let Some(mut conn) = self.inner.take() {
            conn.send_frame(&frame[..frame.len().min(4)])?;
        }
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        self.inner = None;
        Err(TransportError::Closed)
    }
}
