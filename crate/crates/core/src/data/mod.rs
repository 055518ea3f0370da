//! EV charging events: ingestion, cleaning, one-hot encoding, region
//! partitioning and a synthetic generator with a known linear ground truth.

mod encode;
mod ingest;
mod synthetic;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encode::{encode, partition_by_region, partition_with, Encoded, Encoder};
pub use ingest::{
    load_csv, load_station_regions, parse_schema_mapping, write_events_csv,
    write_station_regions, CleaningReport, CsvSchema, Loaded, COLUMN_KEYS,
};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("missing mandatory column `{0}`")]
    MalformedHeader(String),
    #[error("malformed schema mapping line {line}: {text}")]
    MalformedMapping { line: usize, text: String },
    #[error("empty input")]
    EmptyInput,
    #[error("events reference regions outside the configured set; stations: {}", stations.join(", "))]
    UnknownRegion { stations: Vec<String> },
    #[error("dataset rows ({rows}) and targets ({targets}) disagree")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("row {row} has {got} features, expected {expected}")]
    RaggedRow {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One charging session after cleaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub connection_id: String,
    pub start_time: NaiveDateTime,
    pub end_time: NaiveDateTime,
    pub duration_minutes: u32,
    pub connector: String,
    pub start_soc_pct: u8,
    pub end_soc_pct: u8,
    pub total_kwh: f64,
    pub station: String,
    pub region: String,
}

/// Encoded rows for one client. Features are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    feature_names: Vec<String>,
    features: Vec<f64>,
    targets: Vec<f64>,
    region: String,
}

impl ClientDataset {
    pub fn new(
        feature_names: Vec<String>,
        rows: Vec<Vec<f64>>,
        targets: Vec<f64>,
        region: impl Into<String>,
    ) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyInput);
        }
        if rows.len() != targets.len() {
            return Err(DataError::ShapeMismatch {
                rows: rows.len(),
                targets: targets.len(),
            });
        }
        let width = feature_names.len();
        let mut features = Vec::with_capacity(rows.len() * width);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(DataError::RaggedRow {
                    row,
                    expected: width,
                    got: r.len(),
                });
            }
            features.extend_from_slice(r);
        }
        Ok(Self {
            feature_names,
            features,
            targets,
            region: region.into(),
        })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.feature_count();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        (0..self.len()).map(|i| (self.row(i), self.targets[i]))
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn region(&self) -> &str {
        &self.region
    }
}
