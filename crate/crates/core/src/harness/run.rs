use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Assignment, DataSource, ExperimentConfig};
use super::HarnessError;
use crate::data::{
    generate_synthetic, load_csv, load_station_regions, parse_schema_mapping, partition_with,
    ClientDataset, CsvSchema, Encoder, RawEvent, SyntheticSpec,
};
use crate::params::{GlobalModel, ParameterVector};
use crate::server::{run_server, RoundRecord, ServerConfig, ServerRun};
use crate::trainer::TrainConfig;
use crate::transport::{
    inject, run_client, ClientRoundRecord, Listener, ServerAddress, SimNetwork, TcpServerListener,
    TcpTransport, Transport,
};

pub fn client_id(index: usize) -> String {
    format!("client-{:02}", index + 1)
}

#[derive(Debug, Clone)]
pub struct ClientPlan {
    pub id: String,
    pub region: String,
    pub dataset: ClientDataset,
    pub servers: Vec<ServerAddress>,
}

/// Everything derived from a config before any node starts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub clients: Vec<ClientPlan>,
    pub servers: Vec<ServerConfig>,
    pub addresses: Vec<ServerAddress>,
    pub initial: ParameterVector,
    pub train: TrainConfig,
    pub eval_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub id: String,
    pub region: String,
    pub rounds: Vec<ClientRoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerReport {
    pub id: String,
    pub records: Vec<RoundRecord>,
    pub final_model: GlobalModel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timings {
    pub prepare: Duration,
    pub run: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsBundle {
    pub config: ExperimentConfig,
    /// Sorted by client id.
    pub clients: Vec<ClientReport>,
    /// In configured server order.
    pub servers: Vec<ServerReport>,
    pub timings: Timings,
    pub eval_fingerprint: u64,
}

fn load_events(config: &ExperimentConfig) -> Result<Vec<RawEvent>, HarnessError> {
    match &config.data {
        DataSource::Synthetic(s) => Ok(generate_synthetic(&SyntheticSpec {
            rows_per_region: s.rows_per_region,
            regions: s.regions,
            noise_std: s.noise_std,
            seed: s.seed.unwrap_or(config.seed),
        })),
        DataSource::Csv(c) => {
            let renames = match &c.mapping {
                Some(p) => parse_schema_mapping(&std::fs::read_to_string(p).map_err(|e| {
                    HarnessError::Config(format!("{}: {e}", p.display()))
                })?)?,
                None => BTreeMap::new(),
            };
            let station_regions = c.stations.as_deref().map(load_station_regions).transpose()?;
            let loaded = load_csv(
                &c.path,
                &CsvSchema {
                    renames,
                    station_regions,
                },
            )?;
            log::info!("{}: {:?}", c.path.display(), loaded.report);
            Ok(loaded.events)
        }
    }
}

/// Seeded split of event indices into (train, eval).
fn split_eval(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let mut eval = idx.split_off(n - k);
    idx.sort_unstable();
    eval.sort_unstable();
    (idx, eval)
}

fn fingerprint(d: &ClientDataset) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    d.feature_names().hash(&mut h);
    for (row, y) in d.rows() {
        row.iter().for_each(|v| v.to_bits().hash(&mut h));
        y.to_bits().hash(&mut h);
    }
    h.finish()
}

fn server_lists(
    config: &ExperimentConfig,
    ids: &[String],
    addresses: &[ServerAddress],
) -> Result<Vec<Vec<ServerAddress>>, HarnessError> {
    let by_id: BTreeMap<&str, &ServerAddress> =
        addresses.iter().map(|a| (a.id.as_str(), a)).collect();
    match &config.topology.assignment {
        Assignment::Shared => Ok(vec![addresses.to_vec(); ids.len()]),
        Assignment::Disjoint => Ok((0..ids.len())
            .map(|i| vec![addresses[i % addresses.len()].clone()])
            .collect()),
        Assignment::Explicit(map) => {
            if let Some(unknown) = map.keys().find(|c| !ids.contains(c)) {
                return Err(HarnessError::Topology(format!("unknown client `{unknown}`")));
            }
            ids.iter()
                .map(|id| {
                    let list = map.get(id).filter(|l| !l.is_empty()).ok_or_else(|| {
                        HarnessError::Topology(format!("{id} is not assigned to any server"))
                    })?;
                    list.iter()
                        .map(|s| {
                            by_id.get(s.as_str()).map(|a| (*a).clone()).ok_or_else(|| {
                                HarnessError::Topology(format!("{id} lists unknown server `{s}`"))
                            })
                        })
                        .collect()
                })
                .collect()
        }
    }
}

/// Loads data, fits the encoder on all events, holds out the evaluation
/// split, partitions the rest by region and resolves the topology.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    config.validate()?;
    let events = load_events(config)?;
    if events.len() < 2 {
        return Err(HarnessError::Config(format!(
            "need at least two events, found {}",
            events.len()
        )));
    }
    let encoder = Encoder::fit(&events)?;
    let (train_idx, eval_idx) = split_eval(events.len(), config.eval_fraction, config.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| events[i].clone()).collect::<Vec<_>>();
    let eval_dataset = encoder.dataset(&pick(&eval_idx), "eval")?;
    let train_events = pick(&train_idx);
    let regions: Vec<String> = events
        .iter()
        .map(|e| e.region.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let partitions = partition_with(&encoder, &train_events, &regions)?;
    if let Some(n) = config.topology.clients {
        if n != partitions.len() {
            return Err(HarnessError::Config(format!(
                "config expects {n} clients but the data has {} regions",
                partitions.len()
            )));
        }
    }

    let addresses: Vec<ServerAddress> = config
        .topology
        .servers
        .iter()
        .map(|s| ServerAddress {
            id: s.id.clone(),
            endpoint: s.endpoint.clone(),
        })
        .collect();
    let ids: Vec<String> = (0..partitions.len()).map(client_id).collect();
    let lists = server_lists(config, &ids, &addresses)?;
    let clients: Vec<ClientPlan> = partitions
        .into_iter()
        .zip(ids)
        .zip(lists)
        .map(|(((region, dataset), id), servers)| ClientPlan {
            id,
            region,
            dataset,
            servers,
        })
        .collect();

    let mut servers = Vec::new();
    for spec in &config.topology.servers {
        let cohort: Vec<String> = clients
            .iter()
            .filter(|c| c.servers.iter().any(|a| a.id == spec.id))
            .map(|c| c.id.clone())
            .collect();
        if cohort.is_empty() {
            return Err(HarnessError::Topology(format!("{} has no clients", spec.id)));
        }
        let quorum = spec.quorum.unwrap_or(cohort.len());
        if quorum > cohort.len() {
            return Err(HarnessError::Config(format!(
                "{}: quorum {quorum} exceeds its {} clients",
                spec.id,
                cohort.len()
            )));
        }
        let mut sc = ServerConfig::new(&spec.id, spec.aggregator.clone(), cohort, eval_dataset.clone());
        sc.quorum = quorum;
        sc.rounds = config.rounds;
        sc.round_timeout = Duration::from_millis(spec.round_timeout_ms);
        servers.push(sc);
    }

    Ok(Prepared {
        clients,
        servers,
        addresses,
        initial: ParameterVector::zeros(encoder.feature_count() + 1),
        train: config.train.into(),
        eval_fingerprint: fingerprint(&eval_dataset),
    })
}

fn initial_model(p: &Prepared, server_id: &str) -> GlobalModel {
    GlobalModel::new(server_id, p.initial.clone())
}

fn join<T>(h: std::thread::JoinHandle<T>, what: &str) -> Result<T, HarnessError> {
    h.join()
        .map_err(|_| HarnessError::Runtime(format!("{what} panicked")))
}

fn run_nodes<T: Transport + 'static>(
    p: &Prepared,
    config: &ExperimentConfig,
    listeners: Vec<Box<dyn Listener>>,
    transport: impl Fn() -> T,
) -> Result<(Vec<ClientReport>, Vec<ServerReport>), HarnessError> {
    let server_handles: Vec<_> = p
        .servers
        .iter()
        .cloned()
        .zip(listeners)
        .map(|(sc, mut listener)| {
            let initial = initial_model(p, &sc.id);
            std::thread::spawn(move || run_server(&sc, initial, listener.as_mut()))
        })
        .collect();
    let client_handles: Vec<_> = p
        .clients
        .iter()
        .cloned()
        .map(|c| {
            let t = inject(transport(), config.fault_plan.clone());
            let (train, rounds) = (p.train, config.rounds);
            std::thread::spawn(move || {
                let recs = run_client(&c.id, &c.dataset, &c.servers, &train, rounds, &t);
                ClientReport {
                    id: c.id,
                    region: c.region,
                    rounds: recs,
                }
            })
        })
        .collect();

    let clients = client_handles
        .into_iter()
        .map(|h| join(h, "client"))
        .collect::<Result<Vec<_>, _>>()?;
    let mut servers = Vec::new();
    for (h, sc) in server_handles.into_iter().zip(&p.servers) {
        let ServerRun {
            records,
            final_model,
        } = join(h, "server")??;
        servers.push(ServerReport {
            id: sc.id.clone(),
            records,
            final_model,
        });
    }
    Ok((clients, servers))
}

fn io_timeout(config: &ExperimentConfig) -> Duration {
    // A parked request waits for the slowest cohort member, so allow at least
    // one full round window.
    let longest = config.topology.servers.iter().map(|s| s.round_timeout_ms).max().unwrap_or(0);
    Duration::from_millis(longest).max(Duration::from_secs(30))
}

/// Runs a whole experiment in this process: on the simulated network, or on
/// localhost TCP when every server has an endpoint.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsBundle, HarnessError> {
    let start = Instant::now();
    let p = prepare(config)?;
    let prepared = Instant::now();

    let (clients, servers) = if config.uses_tcp() {
        let io = io_timeout(config);
        let listeners = p
            .addresses
            .iter()
            .map(|a| {
                let ep = a.endpoint.as_deref().expect("tcp mode");
                TcpServerListener::bind(ep, io)
                    .map(|l| Box::new(l) as Box<dyn Listener>)
                    .map_err(|e| HarnessError::Runtime(format!("bind {ep}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        run_nodes(&p, config, listeners, || TcpTransport { io_timeout: io })?
    } else {
        let net = SimNetwork::new(p.clients.len());
        let listeners = p
            .addresses
            .iter()
            .map(|a| Box::new(net.listen(&a.id)) as Box<dyn Listener>)
            .collect();
        run_nodes(&p, config, listeners, || net.transport())?
    };

    Ok(MetricsBundle {
        config: config.clone(),
        clients,
        servers,
        timings: Timings {
            prepare: prepared - start,
            run: prepared.elapsed(),
        },
        eval_fingerprint: p.eval_fingerprint,
    })
}

/// Runs one server of a TCP config in this process.
pub fn serve_as_server(config: &ExperimentConfig, server_id: &str) -> Result<ServerReport, HarnessError> {
    if !config.uses_tcp() {
        return Err(HarnessError::Config("distributed mode needs server endpoints".into()));
    }
    let p = prepare(config)?;
    let sc = p
        .servers
        .iter()
        .find(|s| s.id == server_id)
        .ok_or_else(|| HarnessError::Config(format!("no server `{server_id}`")))?;
    let addr = p.addresses.iter().find(|a| a.id == server_id).expect("same ids");
    let ep = addr.endpoint.as_deref().expect("tcp mode");
    let mut listener = TcpServerListener::bind(ep, io_timeout(config))?;
    log::info!("{server_id} listening on {ep}");
    let run = run_server(sc, initial_model(&p, server_id), &mut listener)?;
    Ok(ServerReport {
        id: server_id.to_string(),
        records: run.records,
        final_model: run.final_model,
    })
}

/// Runs one client of a TCP config in this process.
pub fn join_as_client(config: &ExperimentConfig, client: &str) -> Result<ClientReport, HarnessError> {
    if !config.uses_tcp() {
        return Err(HarnessError::Config("distributed mode needs server endpoints".into()));
    }
    let p = prepare(config)?;
    let c = p
        .clients
        .iter()
        .find(|c| c.id == client)
        .ok_or_else(|| HarnessError::Config(format!("no client `{client}`")))?;
    let t = inject(
        TcpTransport {
            io_timeout: io_timeout(config),
        },
        config.fault_plan.clone(),
    );
    let rounds = run_client(&c.id, &c.dataset, &c.servers, &p.train, config.rounds, &t);
    Ok(ClientReport {
        id: c.id.clone(),
        region: c.region.clone(),
        rounds,
    })
}
