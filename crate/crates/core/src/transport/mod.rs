//! Client/server messaging: the frame codec, connection traits with an
//! in-process simulated network and a TCP implementation, fault injection,
//! and the client node with its ordered failover scan.

mod client;
mod envelope;
mod fault;
mod sim;
mod tcp;

use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{
    connect_with_failover, fetch_model, run_client, Attempt, AttemptOutcome, ClientRoundRecord,
    Delivery, FailoverError, Fetched, ALL_SERVERS_UNREACHABLE,
};
pub use envelope::{
    decode, encode, read_frame, CodecError, Envelope, ErrorBody, Kind, Payload, MAX_FRAME_LEN,
};
pub use fault::{inject, FaultKind, FaultPlan, FaultPlanError, FaultWindow, FaultyTransport};
pub use sim::{SimListener, SimNetwork, SimTransport};
pub use tcp::{TcpServerListener, TcpTransport, CONNECT_TIMEOUT};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerAddress {
    pub id: String,
    /// `host:port` for the TCP transport; the simulated network routes by id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl ServerAddress {
    pub fn sim(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            endpoint: None,
        }
    }

    pub fn tcp(id: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            endpoint: Some(endpoint.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connection refused: {0}")]
    Refused(String),
    #[error("connection closed by peer")]
    Closed,
    #[error("timed out waiting for peer")]
    Timeout,
    #[error("io error: {0}")]
    Io(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        use std::io::ErrorKind::*;
        match e.kind() {
            WouldBlock | TimedOut => TransportError::Timeout,
            ConnectionRefused => TransportError::Refused(e.to_string()),
            ConnectionReset | ConnectionAborted | BrokenPipe | UnexpectedEof => {
                TransportError::Closed
            }
            _ => TransportError::Io(e.to_string()),
        }
    }
}

/// A bidirectional stream of frames. Frames include their length prefix, so
/// a truncated frame reaches the peer as-is and fails to decode there.
pub trait Connection: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError>;

    fn send(&mut self, e: &Envelope) -> Result<(), TransportError> {
        self.send_frame(&encode(e))
    }

    fn recv(&mut self) -> Result<Envelope, TransportError> {
        Ok(decode(&self.recv_frame()?)?)
    }
}

/// Client side of the network.
pub trait Transport: Send + Sync {
    /// Opens a connection to `addr` on behalf of a client in protocol round
    /// `round` (1-based).
    fn dial(&self, addr: &ServerAddress, round: u64) -> Result<Box<dyn Connection>, TransportError>;

    /// Tells the network this client is done with `round`. The simulated
    /// network uses it to advance its virtual clock.
    fn round_finished(&self, _round: u64) {}
}

pub enum ListenEvent {
    Incoming(Box<dyn Connection>),
    /// The collection window for the requested round has closed.
    Deadline,
    /// No further connections can arrive.
    Closed,
}

/// Server side of the network.
pub trait Listener: Send {
    /// Waits for the next connection while collecting protocol round `round`.
    /// `timeout` bounds the window on wall-clock transports; the simulated
    /// network signals deadlines on its virtual clock instead.
    fn next(&mut self, round: u64, timeout: Duration) -> ListenEvent;

    /// Timestamp recorded when `round` is aggregated.
    fn timestamp(&self, round: u64) -> DateTime<Utc>;
}
