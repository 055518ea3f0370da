use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::aggregation::AggregatorConfig;
use crate::trainer::TrainConfig;
use crate::transport::FaultPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    #[serde(default = "default_rows_per_region")]
    pub rows_per_region: usize,
    #[serde(default = "default_regions")]
    pub regions: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Falls back to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_rows_per_region() -> usize {
    200
}
fn default_regions() -> usize {
    9
}
fn default_noise() -> f64 {
    0.05
}

impl Default for SyntheticSource {
    fn default() -> Self {
        Self {
            rows_per_region: default_rows_per_region(),
            regions: default_regions(),
            noise_std: default_noise(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    /// `key = header` lines renaming expected columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
    /// `station,region` file; required when the events lack a region column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(CsvSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSource::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSpec {
    pub id: String,
    /// `host:port`. Either every server has one (TCP) or none does (simulated).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
    /// Defaults to the size of the server's cohort.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quorum: Option<usize>,
    #[serde(default = "default_round_timeout_ms")]
    pub round_timeout_ms: u64,
}

fn default_round_timeout_ms() -> u64 {
    10_000
}

impl ServerSpec {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            endpoint: None,
            aggregator: AggregatorConfig::fed_avg(),
            quorum: None,
            round_timeout_ms: default_round_timeout_ms(),
        }
    }
}

/// Which servers each client talks to, in scan order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Every client lists every server in configured order.
    #[default]
    Shared,
    /// Client `i` (0-based, in id order) talks only to server `i mod k`.
    Disjoint,
    /// Client id to server ids.
    Explicit(BTreeMap<String, Vec<String>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub servers: Vec<ServerSpec>,
    /// Expected client count; one client per region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients: Option<usize>,
    #[serde(default)]
    pub assignment: Assignment,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            servers: vec![ServerSpec::new("gs1"), ServerSpec::new("gs2")],
            clients: None,
            assignment: Assignment::Shared,
        }
    }
}

/// Local training settings for experiments. The step size defaults to 0.05,
/// which suits min-max scaled features with one-hot blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    25
}
fn default_lr() -> f64 {
    0.05
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_lr(),
            seed: 0,
        }
    }
}

impl From<TrainSpec> for TrainConfig {
    fn from(t: TrainSpec) -> Self {
        TrainConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub topology: Topology,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default)]
    pub fault_plan: FaultPlan,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Share of all events held out for server-side evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_rounds() -> u64 {
    3
}
fn default_seed() -> u64 {
    42
}
fn default_eval_fraction() -> f64 {
    0.1
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            topology: Topology::default(),
            train: TrainSpec::default(),
            rounds: default_rounds(),
            fault_plan: FaultPlan::default(),
            seed: default_seed(),
            eval_fraction: default_eval_fraction(),
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    /// The single-server baseline: the default experiment with one server.
    pub fn single_server() -> Self {
        let mut c = Self::default();
        c.topology.servers.truncate(1);
        c
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a JSON config. Relative data paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Csv(csv) = &mut cfg.data {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            resolve(&mut csv.path);
            if let Some(p) = csv.mapping.as_mut() {
                resolve(p);
            }
            if let Some(p) = csv.stations.as_mut() {
                resolve(p);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        let servers = &self.topology.servers;
        if servers.is_empty() {
            return bad("at least one server is required".into());
        }
        let ids: BTreeSet<_> = servers.iter().map(|s| s.id.as_str()).collect();
        if ids.len() != servers.len() {
            return bad("server ids must be unique".into());
        }
        let with_endpoint = servers.iter().filter(|s| s.endpoint.is_some()).count();
        if with_endpoint != 0 && with_endpoint != servers.len() {
            return bad("either every server has an endpoint or none does".into());
        }
        for s in servers {
            s.aggregator
                .validate()
                .map_err(|e| HarnessError::Config(format!("{}: {e}", s.id)))?;
            if s.quorum == Some(0) {
                return bad(format!("{}: quorum must be at least 1", s.id));
            }
        }
        if self.topology.clients == Some(0) {
            return bad("at least one client is required".into());
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval_fraction {} outside (0, 1)", self.eval_fraction));
        }
        TrainConfig::from(self.train)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if let DataSource::Synthetic(s) = &self.data {
            if s.regions == 0 || s.rows_per_region == 0 {
                return bad("synthetic data needs at least one region and row".into());
            }
            if !(s.noise_std.is_finite() && s.noise_std >= 0.0) {
                return bad("noise_std must be a non-negative number".into());
            }
        }
        Ok(())
    }

    pub fn uses_tcp(&self) -> bool {
        self.topology.servers.iter().all(|s| s.endpoint.is_some())
    }
}
