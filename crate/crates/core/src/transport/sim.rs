use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};

use super::{Connection, ListenEvent, Listener, ServerAddress, Transport, TransportError};

enum Inbound {
    Connect(SimConnection),
    Deadline(u64),
}

struct Shared {
    inboxes: BTreeMap<String, Sender<Inbound>>,
    clients: usize,
    finished: BTreeMap<u64, usize>,
}

/// In-process network. Dials are instantaneous and time is virtual: the
/// deadline for round `r` fires on every server once each registered client
/// has reported `round_finished(r)`.
#[derive(Clone)]
pub struct SimNetwork {
    shared: Arc<Mutex<Shared>>,
}

impl SimNetwork {
    pub fn new(clients: usize) -> Self {
        Self {
            shared: Arc::new(Mutex::new(Shared {
                inboxes: BTreeMap::new(),
                clients,
                finished: BTreeMap::new(),
            })),
        }
    }

    pub fn listen(&self, server_id: &str) -> SimListener {
        let (tx, rx) = channel();
        self.shared
            .lock()
            .expect("sim network lock")
            .inboxes
            .insert(server_id.to_string(), tx);
        SimListener { inbox: rx }
    }

    pub fn transport(&self) -> SimTransport {
        SimTransport {
            net: self.clone(),
        }
    }
}

#[derive(Clone)]
pub struct SimTransport {
    net: SimNetwork,
}

impl Transport for SimTransport {
    fn dial(&self, addr: &ServerAddress, _round: u64) -> Result<Box<dyn Connection>, TransportError> {
        let shared = self.net.shared.lock().expect("sim network lock");
        let inbox = shared
            .inboxes
            .get(&addr.id)
            .ok_or_else(|| TransportError::Refused(format!("no server `{}`", addr.id)))?;
        let (client, server) = SimConnection::pair();
        inbox
            .send(Inbound::Connect(server))
            .map_err(|_| TransportError::Refused(format!("{} stopped listening", addr.id)))?;
        Ok(Box::new(client))
    }

    fn round_finished(&self, round: u64) {
        let mut shared = self.net.shared.lock().expect("sim network lock");
        let clients = shared.clients;
        let done = shared.finished.entry(round).or_default();
        *done += 1;
        if *done == clients {
            for inbox in shared.inboxes.values() {
                // A server that already stopped has nothing left to close.
                let _ = inbox.send(Inbound::Deadline(round));
            }
        }
    }
}

pub struct SimListener {
    inbox: Receiver<Inbound>,
}

impl Listener for SimListener {
    fn next(&mut self, round: u64, _timeout: Duration) -> ListenEvent {
        loop {
            match self.inbox.recv() {
                Ok(Inbound::Connect(c)) => return ListenEvent::Incoming(Box::new(c)),
                Ok(Inbound::Deadline(r)) if r >= round => return ListenEvent::Deadline,
                Ok(Inbound::Deadline(_)) => continue,
                Err(_) => return ListenEvent::Closed,
            }
        }
    }

    fn timestamp(&self, round: u64) -> DateTime<Utc> {
        DateTime::from_timestamp(round as i64, 0).expect("small timestamp")
    }
}

pub struct SimConnection {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl SimConnection {
    fn pair() -> (Self, Self) {
        let (a_tx, a_rx) = channel();
        let (b_tx, b_rx) = channel();
        (Self { tx: a_tx, rx: b_rx }, Self { tx: b_tx, rx: a_rx })
    }
}

impl Connection for SimConnection {
    fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        self.tx.send(frame.to_vec()).map_err(|_| TransportError::Closed)
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
        self.rx.recv().map_err(|_| TransportError::Closed)
    }
}
