//! CSV ingestion in the recharge-event export layout.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;

use super::{DataError, RawEvent};

/// Logical column keys and their default header names.
pub const COLUMN_KEYS: [(&str, &str); 10] = [
    ("connection_id", "Connection ID"),
    ("start_time", "Recharge Start Time (local)"),
    ("end_time", "Recharge End Time (local)"),
    ("duration", "Recharge duration (hours:minutes)"),
    ("connector", "Connector used"),
    ("start_soc", "Start State of charge (%)"),
    ("end_soc", "End State of charge (%)"),
    ("total_kwh", "Total kWh"),
    ("station", "Station"),
    ("region", "Region"),
];

const OPTIONAL: [&str; 2] = ["duration", "region"];

const TIME_FORMATS: [&str; 5] = [
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y %H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
];

const WRITE_TIME_FORMAT: &str = "%m/%d/%Y %H:%M";

/// Header names per logical column plus an optional station → region map.
#[derive(Debug, Clone, Default)]
pub struct CsvSchema {
    pub renames: BTreeMap<String, String>,
    pub station_regions: Option<BTreeMap<String, String>>,
}

impl CsvSchema {
    fn header_for(&self, key: &str) -> String {
        if let Some(h) = self.renames.get(key) {
            return h.clone();
        }
        COLUMN_KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, h)| (*h).to_string())
            .unwrap_or_else(|| key.to_string())
    }
}

/// Parses `key = header` lines. Blank lines and `#` comments are skipped.
pub fn parse_schema_mapping(text: &str) -> Result<BTreeMap<String, String>, DataError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = || DataError::MalformedMapping {
            line: i + 1,
            text: line.to_string(),
        };
        let (k, v) = line.split_once('=').ok_or_else(malformed)?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() || !COLUMN_KEYS.iter().any(|(key, _)| *key == k) {
            return Err(malformed());
        }
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

/// Reads a `station,region` CSV.
pub fn load_station_regions(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| DataError::MalformedHeader(name.to_string()))
    };
    let (station, region) = (col("station")?, col("region")?);
    let mut out = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let s = record.get(station).unwrap_or("").trim();
        let r = record.get(region).unwrap_or("").trim();
        if !s.is_empty() && !r.is_empty() {
            out.insert(s.to_string(), r.to_string());
        }
    }
    Ok(out)
}

/// Counts of rows dropped during cleaning, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CleaningReport {
    pub rows_read: usize,
    pub kept: usize,
    pub duplicates: usize,
    pub invalid_time: usize,
    pub invalid_soc: usize,
    pub invalid_energy: usize,
    pub missing_fields: usize,
    pub malformed: usize,
}

impl CleaningReport {
    pub fn dropped(&self) -> usize {
        self.duplicates
            + self.invalid_time
            + self.invalid_soc
            + self.invalid_energy
            + self.missing_fields
            + self.malformed
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub events: Vec<RawEvent>,
    pub report: CleaningReport,
}

enum Reject {
    Missing,
    Malformed,
    Time,
    Soc,
    Energy,
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>, DataError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => DataError::FileNotFound(path.display().to_string()),
        _ => DataError::Io(e),
    })?;
    Ok(csv::ReaderBuilder::new().flexible(true).from_reader(file))
}

/// Loads and cleans recharge events. Every dropped row is counted in the
/// returned report.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Loaded, DataError> {
    let mut reader = open_csv(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().trim_start_matches('\u{feff}').to_string())
        .collect();

    let mut cols: BTreeMap<&str, Option<usize>> = BTreeMap::new();
    for (key, _) in COLUMN_KEYS {
        let header = schema.header_for(key);
        let idx = headers.iter().position(|h| *h == header);
        if idx.is_none() && !OPTIONAL.contains(&key) {
            return Err(DataError::MalformedHeader(header));
        }
        cols.insert(key, idx);
    }

    let mut report = CleaningReport::default();
    let mut seen = HashSet::new();
    let mut events = Vec::new();
    for record in reader.records() {
        let record = record?;
        report.rows_read += 1;
        let field = |key: &str| -> Option<&str> {
            cols[key]
                .and_then(|i| record.get(i))
                .map(str::trim)
                .filter(|s| !s.is_empty())
        };
        match parse_row(&field, schema) {
            Err(Reject::Missing) => report.missing_fields += 1,
            Err(Reject::Malformed) => report.malformed += 1,
            Err(Reject::Time) => report.invalid_time += 1,
            Err(Reject::Soc) => report.invalid_soc += 1,
            Err(Reject::Energy) => report.invalid_energy += 1,
            Ok(ev) => {
                if seen.insert(ev.connection_id.clone()) {
                    events.push(ev);
                } else {
                    report.duplicates += 1;
                }
            }
        }
    }
    report.kept = events.len();
    Ok(Loaded { events, report })
}

fn parse_row<'a>(
    field: &dyn Fn(&str) -> Option<&'a str>,
    schema: &CsvSchema,
) -> Result<RawEvent, Reject> {
    let text = |key: &str| -> Result<String, Reject> {
        match field(key) {
            // Identifier-like fields consisting only of zeros are placeholders.
            Some(s) if !s.chars().all(|c| c == '0') => Ok(s.to_string()),
            _ => Err(Reject::Missing),
        }
    };
    let connection_id = text("connection_id")?;
    let connector = text("connector")?;
    let station = text("station")?;
    let start_raw = field("start_time").ok_or(Reject::Missing)?;
    let end_raw = field("end_time").ok_or(Reject::Missing)?;
    let start_soc_raw = field("start_soc").ok_or(Reject::Missing)?;
    let end_soc_raw = field("end_soc").ok_or(Reject::Missing)?;
    let kwh_raw = field("total_kwh").ok_or(Reject::Missing)?;

    let start_time = parse_time(start_raw).ok_or(Reject::Malformed)?;
    let end_time = parse_time(end_raw).ok_or(Reject::Malformed)?;
    let start_soc: i64 = parse_int(start_soc_raw).ok_or(Reject::Malformed)?;
    let end_soc: i64 = parse_int(end_soc_raw).ok_or(Reject::Malformed)?;
    let total_kwh: f64 = kwh_raw.parse().map_err(|_| Reject::Malformed)?;

    if end_time < start_time {
        return Err(Reject::Time);
    }
    let duration_minutes = match field("duration") {
        Some(d) => parse_duration(d).ok_or(Reject::Malformed)?,
        None => u32::try_from((end_time - start_time).num_minutes()).map_err(|_| Reject::Time)?,
    };
    if !(0..=100).contains(&start_soc) || !(0..=100).contains(&end_soc) {
        return Err(Reject::Soc);
    }
    if !(total_kwh.is_finite() && total_kwh >= 0.0) {
        return Err(Reject::Energy);
    }
    let region = match &schema.station_regions {
        Some(map) => map.get(&station).cloned().unwrap_or_default(),
        None => field("region").unwrap_or("").to_string(),
    };
    Ok(RawEvent {
        connection_id,
        start_time,
        end_time,
        duration_minutes,
        connector,
        start_soc_pct: start_soc as u8,
        end_soc_pct: end_soc as u8,
        total_kwh,
        station,
        region,
    })
}

fn parse_time(s: &str) -> Option<NaiveDateTime> {
    TIME_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

fn parse_int(s: &str) -> Option<i64> {
    s.parse::<i64>().ok().or_else(|| {
        let f: f64 = s.parse().ok()?;
        (f.fract() == 0.0 && f.is_finite()).then_some(f as i64)
    })
}

/// `h:mm` (or `h:mm:ss`, seconds truncated) or a bare minute count.
fn parse_duration(s: &str) -> Option<u32> {
    let mut parts = s.split(':');
    let first: u32 = parts.next()?.trim().parse().ok()?;
    match parts.next() {
        None => Some(first),
        Some(m) => {
            let minutes: u32 = m.trim().parse().ok()?;
            if minutes >= 60 {
                return None;
            }
            Some(first * 60 + minutes)
        }
    }
}

/// Writes events with the default headers, in a form `load_csv` reads back
/// unchanged.
pub fn write_events_csv(path: &Path, events: &[RawEvent]) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(COLUMN_KEYS.iter().map(|(_, h)| *h))?;
    for e in events {
        w.write_record([
            e.connection_id.clone(),
            e.start_time.format(WRITE_TIME_FORMAT).to_string(),
            e.end_time.format(WRITE_TIME_FORMAT).to_string(),
            format!("{}:{:02}", e.duration_minutes / 60, e.duration_minutes % 60),
            e.connector.clone(),
            e.start_soc_pct.to_string(),
            e.end_soc_pct.to_string(),
            e.total_kwh.to_string(),
            e.station.clone(),
            e.region.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_station_regions(path: &Path, events: &[RawEvent]) -> Result<(), DataError> {
    let map: BTreeMap<&str, &str> = events
        .iter()
        .map(|e| (e.station.as_str(), e.region.as_str()))
        .collect();
    let mut f = std::io::BufWriter::new(File::create(path)?);
    writeln!(f, "station,region")?;
    for (s, r) in map {
        writeln!(f, "{s},{r}")?;
    }
    f.flush()?;
    Ok(())
}
