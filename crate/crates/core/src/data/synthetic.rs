use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawEvent;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows_per_region: usize,
    pub regions: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            rows_per_region: 200,
            regions: 9,
            noise_std: 0.05,
            seed: 42,
        }
    }
}

/// The linear rule synthetic energy values are drawn from:
/// `kwh = per_minute · duration + per_soc_pct · (end_soc − start_soc) + offset(region)`.
pub struct GroundTruth;

impl GroundTruth {
    pub const KWH_PER_MINUTE: f64 = 0.05;
    pub const KWH_PER_SOC_PCT: f64 = 0.3;

    pub fn region_offset(region_index: usize) -> f64 {
        1.0 + 0.25 * region_index as f64
    }

    pub fn region_label(region_index: usize) -> String {
        format!("R{:02}", region_index + 1)
    }

    pub fn kwh(duration_minutes: u32, start_soc: u8, end_soc: u8, region_index: usize) -> f64 {
        Self::KWH_PER_MINUTE * f64::from(duration_minutes)
            + Self::KWH_PER_SOC_PCT * (f64::from(end_soc) - f64::from(start_soc))
            + Self::region_offset(region_index)
    }
}

const CONNECTORS: [&str; 3] = ["CCS", "CHAdeMO", "J1772"];
const STATIONS_PER_REGION: usize = 3;

/// Draws `rows_per_region` sessions for each region. Sessions are either short
/// top-ups (10–40 min, high starting charge) or long charges (3–4 h, low
/// starting charge), with start times spread over two years.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<RawEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = (spec.noise_std > 0.0)
        .then(|| Normal::new(0.0, spec.noise_std).expect("finite noise std"));
    let epoch = NaiveDate::from_ymd_opt(2020, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();

    let mut events = Vec::with_capacity(spec.regions * spec.rows_per_region);
    for region in 0..spec.regions {
        for _ in 0..spec.rows_per_region {
            let (duration, start_soc, delta) = if rng.random_bool(0.5) {
                (
                    rng.random_range(10..=40u32),
                    rng.random_range(40..=60u8),
                    rng.random_range(5..=14u8),
                )
            } else {
                (
                    rng.random_range(180..=240u32),
                    rng.random_range(5..=20u8),
                    rng.random_range(50..=74u8),
                )
            };
            let end_soc = start_soc + delta;
            let connector = CONNECTORS[rng.random_range(0..CONNECTORS.len())];
            let station = rng.random_range(0..STATIONS_PER_REGION);
            let start_time = epoch
                + Duration::days(rng.random_range(0..730))
                + Duration::minutes(rng.random_range(0..1440));
            let id: u128 = rng.random();
            let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
            let kwh = (GroundTruth::kwh(duration, start_soc, end_soc, region) + eps).max(0.0);
            events.push(RawEvent {
                connection_id: uuid_like(id),
                start_time,
                end_time: start_time + Duration::minutes(i64::from(duration)),
                duration_minutes: duration,
                connector: connector.to_string(),
                start_soc_pct: start_soc,
                end_soc_pct: end_soc,
                total_kwh: kwh,
                station: format!("NBA-{:02}{:02}", region + 1, station + 1),
                region: GroundTruth::region_label(region),
            });
        }
    }
    events
}

fn uuid_like(x: u128) -> String {
    let h = format!("{x:032x}");
    format!("{}-{}-{}-{}-{}", &h[..8], &h[8..12], &h[12..16], &h[16..20], &h[20..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    /// Solves the 3×3 normal equations for `kwh ≈ a·duration + b·Δsoc + c`
    /// by Gaussian elimination.
    fn least_squares(events: &[&RawEvent]) -> [f64; 3] {
        let mut m = [[0.0f64; 4]; 3];
        for e in events {
            let x = [
                f64::from(e.duration_minutes),
                f64::from(e.end_soc_pct) - f64::from(e.start_soc_pct),
                1.0,
            ];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += x[i] * x[j];
                }
                m[i][3] += x[i] * e.total_kwh;
            }
        }
        for col in 0..3 {
            let pivot = (col..3).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
            m.swap(col, pivot);
            for row in 0..3 {
                if row != col {
                    let f = m[row][col] / m[col][col];
                    let pivot_row = m[col];
                    for (x, p) in m[row].iter_mut().zip(pivot_row).skip(col) {
                        *x -= f * p;
                    }
                }
            }
        }
        [m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]]
    }

    #[test]
    fn noiseless_data_recovers_ground_truth() {
        let spec = SyntheticSpec {
            noise_std: 0.0,
            regions: 4,
            rows_per_region: 50,
            seed: 11,
        };
        let events = generate_synthetic(&spec);
        for r in 0..spec.regions {
            let label = GroundTruth::region_label(r);
            let rows: Vec<_> = events.iter().filter(|e| e.region == label).collect();
            let [a, b, c] = least_squares(&rows);
            assert!((a - GroundTruth::KWH_PER_MINUTE).abs() < 1e-6, "a = {a}");
            assert!((b - GroundTruth::KWH_PER_SOC_PCT).abs() < 1e-6, "b = {b}");
            assert!((c - GroundTruth::region_offset(r)).abs() < 1e-6, "c = {c}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec::default();
        assert_eq!(generate_synthetic(&spec), generate_synthetic(&spec));
        let other = SyntheticSpec { seed: 43, ..spec };
        assert_ne!(generate_synthetic(&spec), generate_synthetic(&other));
    }

    #[test]
    fn cardinality_and_invariants() {
        let spec = SyntheticSpec {
            regions: 9,
            rows_per_region: 100,
            ..SyntheticSpec::default()
        };
        let events = generate_synthetic(&spec);
        assert_eq!(events.len(), 900);
        let regions: BTreeSet<_> = events.iter().map(|e| e.region.as_str()).collect();
        assert_eq!(regions.len(), 9);
        let ids: BTreeSet<_> = events.iter().map(|e| e.connection_id.as_str()).collect();
        assert_eq!(ids.len(), 900);
        for e in &events {
            assert!(e.end_time >= e.start_time);
            assert!(e.end_soc_pct <= 100 && e.start_soc_pct <= e.end_soc_pct);
            assert!(e.total_kwh >= 0.0);
            assert_eq!((e.end_time - e.start_time).num_minutes(), i64::from(e.duration_minutes));
        }
    }

    #[test]
    fn csv_round_trip() {
        let events = generate_synthetic(&SyntheticSpec {
            rows_per_region: 20,
            regions: 3,
            ..SyntheticSpec::default()
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.csv");
        let stations = dir.path().join("stations.csv");
        super::super::write_events_csv(&path, &events).unwrap();
        super::super::write_station_regions(&stations, &events).unwrap();
        let schema = super::super::CsvSchema {
            station_regions: Some(super::super::load_station_regions(&stations).unwrap()),
            ..Default::default()
        };
        let loaded = super::super::load_csv(&path, &schema).unwrap();
        assert_eq!(loaded.events, events);
        assert_eq!(loaded.report.dropped(), 0);
    }
}
