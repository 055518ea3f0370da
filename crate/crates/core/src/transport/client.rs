use serde::Serialize;
use thiserror::Error;

use super::{Envelope, Payload, ServerAddress, Transport};
use crate::data::ClientDataset;
use crate::params::{ClientUpdate, GlobalModel};
use crate::trainer::{train_local, TrainConfig, TrainReport};

pub const ALL_SERVERS_UNREACHABLE: &str = "Failed to connect to all servers.";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum AttemptOutcome {
    Delivered,
    Refused(String),
    /// Connected, but the exchange broke off before a reply arrived.
    PartialDelivery(String),
    /// The server answered with an error envelope or an unexpected reply.
    Rejected { code: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attempt {
    pub server_id: String,
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FailoverError {
    #[error("Failed to connect to all servers.")]
    AllServersUnreachable { attempts: Vec<Attempt> },
    #[error("no servers configured")]
    NoServers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub delivered_to: String,
    pub attempts: Vec<Attempt>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fetched {
    pub model: GlobalModel,
    pub server_id: String,
    pub attempts: Vec<Attempt>,
}

fn rejected(reply: Envelope) -> AttemptOutcome {
    match reply.payload {
        Payload::Error(b) => AttemptOutcome::Rejected {
            code: b.code,
            message: b.message,
        },
        other => AttemptOutcome::Rejected {
            code: "unexpected-reply".into(),
            message: format!("{other:?}").chars().take(80).collect(),
        },
    }
}

/// Tries each server in list order and stops at the first one whose reply
/// `accept` takes.
fn scan<T>(
    transport: &dyn Transport,
    servers: &[ServerAddress],
    round: u64,
    request: &Envelope,
    accept: impl Fn(Envelope) -> Result<T, AttemptOutcome>,
) -> Result<(T, String, Vec<Attempt>), FailoverError> {
    if servers.is_empty() {
        return Err(FailoverError::NoServers);
    }
    let mut attempts = Vec::new();
    for server in servers {
        let outcome = match transport.dial(server, round) {
            Err(e) => AttemptOutcome::Refused(e.to_string()),
            Ok(mut conn) => match conn.send(request).and_then(|()| conn.recv()) {
                Err(e) => AttemptOutcome::PartialDelivery(e.to_string()),
                Ok(reply) => match accept(reply) {
                    Ok(value) => {
                        attempts.push(Attempt {
                            server_id: server.id.clone(),
                            outcome: AttemptOutcome::Delivered,
                        });
                        return Ok((value, server.id.clone(), attempts));
                    }
                    Err(outcome) => outcome,
                },
            },
        };
        log::debug!("{} round {round}: {} failed: {outcome:?}", request.sender, server.id);
        attempts.push(Attempt {
            server_id: server.id.clone(),
            outcome,
        });
    }
    Err(FailoverError::AllServersUnreachable { attempts })
}

/// Delivers `update` to the first server in `servers` that acknowledges it.
/// Servers after the accepting one are never dialed.
pub fn connect_with_failover(
    transport: &dyn Transport,
    servers: &[ServerAddress],
    round: u64,
    update: &ClientUpdate,
) -> Result<Delivery, FailoverError> {
    let request = Envelope::new(update.round(), update.client_id(), Payload::Update(update.clone()));
    let ((), delivered_to, attempts) = scan(transport, servers, round, &request, |reply| {
        match reply.payload {
            Payload::Ack => Ok(()),
            _ => Err(rejected(reply)),
        }
    })?;
    Ok(Delivery {
        delivered_to,
        attempts,
    })
}

/// Asks servers in order for the model a client in protocol round `round`
/// should start from.
pub fn fetch_model(
    transport: &dyn Transport,
    servers: &[ServerAddress],
    round: u64,
    client_id: &str,
) -> Result<Fetched, FailoverError> {
    let request = Envelope::new(round.saturating_sub(1), client_id, Payload::Hello);
    let (model, server_id, attempts) = scan(transport, servers, round, &request, |reply| {
        match reply.payload {
            Payload::ModelBroadcast(m) => Ok(m),
            _ => Err(rejected(reply)),
        }
    })?;
    Ok(Fetched {
        model,
        server_id,
        attempts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub round: u64,
    pub fetched_from: Option<String>,
    pub delivered_to: Option<String>,
    pub local_final_loss: Option<f64>,
    pub train: Option<TrainReport>,
    pub attempts: Vec<Attempt>,
    pub error: Option<String>,
}

impl ClientRoundRecord {
    fn failed(round: u64, attempts: Vec<Attempt>, error: String) -> Self {
        Self {
            round,
            fetched_from: None,
            delivered_to: None,
            local_final_loss: None,
            train: None,
            attempts,
            error: Some(error),
        }
    }
}

fn attempts_of(e: &FailoverError) -> Vec<Attempt> {
    match e {
        FailoverError::AllServersUnreachable { attempts } => attempts.clone(),
        FailoverError::NoServers => Vec::new(),
    }
}

fn client_round(
    client_id: &str,
    dataset: &ClientDataset,
    servers: &[ServerAddress],
    train_cfg: &TrainConfig,
    round: u64,
    transport: &dyn Transport,
) -> ClientRoundRecord {
    let fetched = match fetch_model(transport, servers, round, client_id) {
        Ok(f) => f,
        Err(e) => {
            log::warn!("{client_id} round {round}: fetch: {e}");
            return ClientRoundRecord::failed(round, attempts_of(&e), e.to_string());
        }
    };
    let mut attempts = fetched.attempts;
    let report = match train_local(&fetched.model.weights, dataset, train_cfg) {
        Ok(r) => r,
        Err(e) => {
            let mut rec = ClientRoundRecord::failed(round, attempts, e.to_string());
            rec.fetched_from = Some(fetched.server_id);
            return rec;
        }
    };
    let update = ClientUpdate::new(
        client_id,
        fetched.model.round,
        report.sample_count,
        &fetched.model.weights,
        report.final_weights.clone(),
    )
    .expect("trained weights match the broadcast dimension");
    let (delivered_to, error) = match connect_with_failover(transport, servers, round, &update) {
        Ok(d) => {
            attempts.extend(d.attempts);
            (Some(d.delivered_to), None)
        }
        Err(e) => {
            log::warn!("{client_id} round {round}: {e}");
            attempts.extend(attempts_of(&e));
            (None, Some(e.to_string()))
        }
    };
    ClientRoundRecord {
        round,
        fetched_from: Some(fetched.server_id),
        delivered_to,
        local_final_loss: report.loss_per_epoch.last().copied(),
        train: Some(report),
        attempts,
        error,
    }
}

/// The client node loop. Each round fetches the current model, trains on the
/// local dataset and delivers the update. Failures are recorded per round and
/// never stop the loop.
pub fn run_client(
    client_id: &str,
    dataset: &ClientDataset,
    servers: &[ServerAddress],
    train_cfg: &TrainConfig,
    rounds: u64,
    transport: &dyn Transport,
) -> Vec<ClientRoundRecord> {
    (1..=rounds)
        .map(|round| {
            let rec = client_round(client_id, dataset, servers, train_cfg, round, transport);
            transport.round_finished(round);
            rec
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterVector;
    use crate::transport::{
        inject, Connection, FaultKind, FaultPlan, FaultWindow, ListenEvent, Listener, SimNetwork,
        TransportError,
    };
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;
    use std::time::Duration;

    fn addrs(ids: &[&str]) -> Vec<ServerAddress> {
        ids.iter().map(|&id| ServerAddress::sim(id)).collect()
    }

    fn update() -> ClientUpdate {
        let b = ParameterVector::new(vec![1.0, 1.0]).unwrap();
        ClientUpdate::new("c1", 0, 5, &b, ParameterVector::new(vec![0.5, 0.5]).unwrap()).unwrap()
    }

    /// Answers every connection to `id` with `reply`, counting how many came in.
    fn responder(net: &SimNetwork, id: &str, reply: Option<Payload>) -> std::thread::JoinHandle<usize> {
        let mut l = net.listen(id);
        let id = id.to_string();
        std::thread::spawn(move || {
            let mut n = 0;
            while let ListenEvent::Incoming(mut c) = l.next(1, Duration::ZERO) {
                n += 1;
                let Ok(req) = c.recv() else { continue };
                let payload = reply.clone().unwrap_or_else(|| match req.payload {
                    Payload::Hello => Payload::ModelBroadcast(GlobalModel::new(&id, ParameterVector::zeros(2))),
                    _ => Payload::Ack,
                });
                let _ = c.send(&Envelope::new(req.round, &id, payload));
            }
            n
        })
    }

    #[test]
    fn first_down_second_up() {
        let net = SimNetwork::new(1);
        let s2 = responder(&net, "S2", None);
        let t = inject(net.transport(), FaultPlan::refuse_from("S1", 1));
        let d = connect_with_failover(&t, &addrs(&["S1", "S2"]), 1, &update()).unwrap();
        assert_eq!(d.delivered_to, "S2");
        assert!(matches!(d.attempts[0].outcome, AttemptOutcome::Refused(_)));
        drop((t, net));
        assert_eq!(s2.join().unwrap(), 1);
    }

    #[test]
    fn first_up_second_never_dialed() {
        let net = SimNetwork::new(1);
        let s1 = responder(&net, "S1", None);
        let s2 = responder(&net, "S2", None);
        let t = net.transport();
        let d = connect_with_failover(&t, &addrs(&["S1", "S2"]), 1, &update()).unwrap();
        assert_eq!(d.delivered_to, "S1");
        assert_eq!(d.attempts.len(), 1);
        drop((t, net));
        assert_eq!((s1.join().unwrap(), s2.join().unwrap()), (1, 0));
    }

    #[test]
    fn all_down_message_is_exact() {
        let net = SimNetwork::new(1);
        let plan = FaultPlan::refuse_from("S1", 1).with("S2", FaultWindow { from_round: 1, until_round: None, kind: FaultKind::Refuse }).unwrap();
        let t = inject(net.transport(), plan);
        let err = connect_with_failover(&t, &addrs(&["S1", "S2"]), 1, &update()).unwrap_err();
        assert_eq!(err.to_string(), ALL_SERVERS_UNREACHABLE);
        assert_eq!(err.to_string(), "Failed to connect to all servers.");
        let FailoverError::AllServersUnreachable { attempts } = err else { unreachable!() };
        assert_eq!(attempts.len(), 2);
        assert_eq!(connect_with_failover(&t, &[], 1, &update()), Err(FailoverError::NoServers));
    }

    #[test]
    fn drop_mid_message_fails_over() {
        let net = SimNetwork::new(1);
        let s1 = responder(&net, "S1", None);
        let s2 = responder(&net, "S2", None);
        let plan = FaultPlan::default()
            .with("S1", FaultWindow { from_round: 1, until_round: Some(1), kind: FaultKind::DropMidMessage })
            .unwrap();
        let t = inject(net.transport(), plan);
        let d = connect_with_failover(&t, &addrs(&["S1", "S2"]), 1, &update()).unwrap();
        assert_eq!(d.delivered_to, "S2");
        assert!(matches!(d.attempts[0].outcome, AttemptOutcome::PartialDelivery(_)));
        // Outside the window S1 works again.
        let d = connect_with_failover(&t, &addrs(&["S1", "S2"]), 2, &update()).unwrap();
        assert_eq!(d.delivered_to, "S1");
        drop((t, net));
        assert_eq!((s1.join().unwrap(), s2.join().unwrap()), (2, 1));
    }

    #[test]
    fn error_reply_continues_scan() {
        let net = SimNetwork::new(1);
        let _s1 = responder(&net, "S1", Some(Payload::Error(crate::transport::ErrorBody { code: "stale-round".into(), message: "x".into() })));
        let _s2 = responder(&net, "S2", None);
        let t = net.transport();
        let d = connect_with_failover(&t, &addrs(&["S1", "S2"]), 1, &update()).unwrap();
        assert_eq!(d.delivered_to, "S2");
        assert!(matches!(&d.attempts[0].outcome, AttemptOutcome::Rejected { code, .. } if code == "stale-round"));
    }

    /// A transport whose servers answer inline, so client loops can be
    /// traced without server threads.
    struct Inline {
        plan: FaultPlan,
        dials: Mutex<Vec<(String, u64)>>,
        finished: AtomicUsize,
    }

    struct InlineConn {
        id: String,
        reply: Option<Vec<u8>>,
    }

    impl Connection for InlineConn {
        fn send_frame(&mut self, frame: &[u8]) -> Result<(), TransportError> {
            let req = crate::transport::decode(frame)?;
            let payload = match req.payload {
                Payload::Hello => Payload::ModelBroadcast(GlobalModel {
                    server_id: self.id.clone(),
                    round: req.round,
                    weights: ParameterVector::zeros(2),
                }),
                _ => Payload::Ack,
            };
            self.reply = Some(crate::transport::encode(&Envelope::new(req.round, &self.id, payload)));
            Ok(())
        }

        fn recv_frame(&mut self) -> Result<Vec<u8>, TransportError> {
            self.reply.take().ok_or(TransportError::Closed)
        }
    }

    impl Transport for Inline {
        fn dial(&self, addr: &ServerAddress, round: u64) -> Result<Box<dyn Connection>, TransportError> {
            self.dials.lock().unwrap().push((addr.id.clone(), round));
            if self.plan.fault_at(&addr.id, round).is_some() {
                return Err(TransportError::Refused(addr.id.clone()));
            }
            Ok(Box::new(InlineConn { id: addr.id.clone(), reply: None }))
        }

        fn round_finished(&self, _round: u64) {
            self.finished.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn dataset() -> ClientDataset {
        ClientDataset::new(vec!["x".into()], vec![vec![1.0], vec![2.0]], vec![1.0, 2.0], "r").unwrap()
    }

    fn inline(plan: FaultPlan) -> Inline {
        Inline { plan, dials: Mutex::new(Vec::new()), finished: AtomicUsize::new(0) }
    }

    #[test]
    fn client_loop_traces() {
        let servers = addrs(&["S1", "S2"]);
        let cfg = TrainConfig::default();

        let t = inline(FaultPlan::default());
        let recs = run_client("c1", &dataset(), &servers, &cfg, 3, &t);
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.delivered_to.as_deref() == Some("S1")));
        assert!(recs.iter().all(|r| r.train.as_ref().unwrap().loss_per_epoch.len() == 25));
        assert_eq!(recs.iter().map(|r| r.round).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(t.finished.load(Ordering::SeqCst), 3);

        let plan = FaultPlan::default()
            .with("S1", FaultWindow { from_round: 2, until_round: Some(2), kind: FaultKind::Refuse })
            .unwrap();
        let recs = run_client("c1", &dataset(), &servers, &cfg, 3, &inline(plan));
        let to: Vec<_> = recs.iter().map(|r| r.delivered_to.clone().unwrap()).collect();
        assert_eq!(to, vec!["S1", "S2", "S1"]);

        let plan = FaultPlan::refuse_from("S1", 1).with("S2", FaultWindow { from_round: 1, until_round: None, kind: FaultKind::Refuse }).unwrap();
        let t = inline(plan);
        let recs = run_client("c1", &dataset(), &servers, &cfg, 3, &t);
        assert_eq!(recs.len(), 3);
        for r in &recs {
            assert_eq!(r.delivered_to, None);
            assert_eq!(r.error.as_deref(), Some(ALL_SERVERS_UNREACHABLE));
        }
        assert_eq!(t.finished.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn no_double_delivery_and_deterministic() {
        let servers = addrs(&["S1", "S2", "S3"]);
        let plan = FaultPlan::default()
            .with("S1", FaultWindow { from_round: 2, until_round: Some(3), kind: FaultKind::Refuse })
            .unwrap()
            .with("S2", FaultWindow { from_round: 3, until_round: None, kind: FaultKind::Refuse })
            .unwrap();
        let run = || {
            let t = inline(plan.clone());
            let recs = run_client("c1", &dataset(), &servers, &TrainConfig::default(), 5, &t);
            (recs, t.dials.into_inner().unwrap())
        };
        let (a, dials) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        for rec in &a {
            let delivered = rec.attempts.iter().filter(|x| x.outcome == AttemptOutcome::Delivered).count();
            // one successful fetch plus one successful delivery
            assert_eq!(delivered, 2);
        }
        let to: Vec<_> = a.iter().map(|r| r.delivered_to.clone().unwrap()).collect();
        assert_eq!(to, vec!["S1", "S2", "S3", "S1", "S1"]);
        // Round 1 never touches S2: fetch and delivery both stop at S1.
        assert_eq!(dials.iter().filter(|(_, r)| *r == 1).count(), 2);
    }
}
