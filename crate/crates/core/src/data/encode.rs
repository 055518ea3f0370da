use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, Timelike, Weekday};

use super::{ClientDataset, DataError, RawEvent};

const DAY_BUCKETS: [&str; 2] = ["weekday", "weekend"];
const PERIOD_BUCKETS: [&str; 4] = ["afternoon", "evening", "morning", "night"];

/// Feature layout fitted on a whole corpus: categorical vocabularies and
/// min/max ranges for the numeric columns. Fitting once and encoding every
/// partition with the same encoder keeps all clients in one feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    connectors: Vec<String>,
    regions: Vec<String>,
    duration: (f64, f64),
    start_soc: (f64, f64),
    end_soc: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub feature_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn scale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

fn day_bucket(e: &RawEvent) -> &'static str {
    match e.start_time.weekday() {
        Weekday::Sat | Weekday::Sun => "weekend",
        _ => "weekday",
    }
}

fn period_bucket(e: &RawEvent) -> &'static str {
    match e.start_time.hour() {
        0..=5 => "night",
        6..=11 => "morning",
        12..=17 => "afternoon",
        _ => "evening",
    }
}

fn one_hot(row: &mut Vec<f64>, vocab: &[impl AsRef<str>], value: &str) {
    row.extend(vocab.iter().map(|v| f64::from(u8::from(v.as_ref() == value))));
}

impl Encoder {
    pub fn fit(events: &[RawEvent]) -> Result<Self, DataError> {
        if events.is_empty() {
            return Err(DataError::EmptyInput);
        }
        let connectors: BTreeSet<&str> = events.iter().map(|e| e.connector.as_str()).collect();
        let regions: BTreeSet<&str> = events.iter().map(|e| e.region.as_str()).collect();
        Ok(Self {
            connectors: connectors.into_iter().map(String::from).collect(),
            regions: regions.into_iter().map(String::from).collect(),
            duration: range(events.iter().map(|e| f64::from(e.duration_minutes))),
            start_soc: range(events.iter().map(|e| f64::from(e.start_soc_pct))),
            end_soc: range(events.iter().map(|e| f64::from(e.end_soc_pct))),
        })
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = vec![
            "duration_minutes".to_string(),
            "start_soc_pct".to_string(),
            "end_soc_pct".to_string(),
        ];
        names.extend(self.connectors.iter().map(|c| format!("connector={c}")));
        names.extend(DAY_BUCKETS.iter().map(|d| format!("day={d}")));
        names.extend(PERIOD_BUCKETS.iter().map(|p| format!("period={p}")));
        names.extend(self.regions.iter().map(|r| format!("region={r}")));
        names
    }

    pub fn feature_count(&self) -> usize {
        3 + self.connectors.len() + DAY_BUCKETS.len() + PERIOD_BUCKETS.len() + self.regions.len()
    }

    /// Numeric columns min-max scaled with the fitted ranges, then indicator
    /// blocks for connector, day, period and region.
    pub fn encode_row(&self, e: &RawEvent) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.feature_count());
        row.push(scale(f64::from(e.duration_minutes), self.duration));
        row.push(scale(f64::from(e.start_soc_pct), self.start_soc));
        row.push(scale(f64::from(e.end_soc_pct), self.end_soc));
        one_hot(&mut row, &self.connectors, &e.connector);
        one_hot(&mut row, &DAY_BUCKETS, day_bucket(e));
        one_hot(&mut row, &PERIOD_BUCKETS, period_bucket(e));
        one_hot(&mut row, &self.regions, &e.region);
        row
    }

    pub fn encode(&self, events: &[RawEvent]) -> Encoded {
        Encoded {
            feature_names: self.feature_names(),
            rows: events.iter().map(|e| self.encode_row(e)).collect(),
            targets: events.iter().map(|e| e.total_kwh).collect(),
        }
    }

    pub fn dataset(&self, events: &[RawEvent], region: &str) -> Result<ClientDataset, DataError> {
        let enc = self.encode(events);
        ClientDataset::new(enc.feature_names, enc.rows, enc.targets, region)
    }
}

/// Fits an encoder on `events` and encodes them; the target is `total_kwh`.
pub fn encode(events: &[RawEvent]) -> Result<Encoded, DataError> {
    Ok(Encoder::fit(events)?.encode(events))
}

/// Splits events into one dataset per region, all sharing the vocabulary and
/// scaling fitted on the full event list.
pub fn partition_by_region(
    events: &[RawEvent],
    regions: &[String],
) -> Result<BTreeMap<String, ClientDataset>, DataError> {
    if events.is_empty() {
        return Err(DataError::EmptyInput);
    }
    check_regions(events, regions)?;
    let encoder = Encoder::fit(events)?;
    partition_with(&encoder, events, regions)
}

/// Like [`partition_by_region`] with an encoder fitted elsewhere, e.g. on a
/// corpus that also contains held-out rows.
pub fn partition_with(
    encoder: &Encoder,
    events: &[RawEvent],
    regions: &[String],
) -> Result<BTreeMap<String, ClientDataset>, DataError> {
    check_regions(events, regions)?;
    let mut groups: BTreeMap<&str, Vec<RawEvent>> = BTreeMap::new();
    for e in events {
        groups.entry(e.region.as_str()).or_default().push(e.clone());
    }
    groups
        .into_iter()
        .map(|(region, evs)| Ok((region.to_string(), encoder.dataset(&evs, region)?)))
        .collect()
}

fn check_regions(events: &[RawEvent], regions: &[String]) -> Result<(), DataError> {
    if regions.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let stations: BTreeSet<&str> = events
        .iter()
        .filter(|e| !regions.contains(&e.region))
        .map(|e| e.station.as_str())
        .collect();
    if stations.is_empty() {
        Ok(())
    } else {
        Err(DataError::UnknownRegion {
            stations: stations.into_iter().map(String::from).collect(),
        })
    }
}
