use serde::{Deserialize, Serialize};

use super::{HarnessError, MetricsBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `|L_multi − L_single| / L_single` on the best server's final loss.
    pub relative_final_loss_gap: f64,
    /// `(round, gap)` using the best server in each round.
    pub per_round_gaps: Vec<(u64, f64)>,
    pub multi_final_loss: f64,
    pub single_final_loss: f64,
}

fn relative_gap(multi: f64, single: f64) -> f64 {
    if multi == single {
        0.0
    } else {
        (multi - single).abs() / single
    }
}

/// Lowest eval loss any server reached in `round`.
fn best_at(b: &MetricsBundle, round: u64) -> Option<f64> {
    b.servers
        .iter()
        .filter_map(|s| s.records.iter().find(|r| r.round == round))
        .map(|r| r.eval_loss)
        .min_by(f64::total_cmp)
}

/// The lowest final-round eval loss across a run's servers.
pub fn best_final_loss(b: &MetricsBundle) -> Option<f64> {
    best_at(b, b.config.rounds)
}

pub fn compare(multi: &MetricsBundle, single: &MetricsBundle) -> Result<Comparison, HarnessError> {
    let mismatch = |m: String| Err(HarnessError::MismatchedConfigs(m));
    if multi.config.rounds != single.config.rounds {
        return mismatch(format!(
            "rounds differ: {} vs {}",
            multi.config.rounds, single.config.rounds
        ));
    }
    if multi.eval_fingerprint != single.eval_fingerprint {
        return mismatch("runs were evaluated on different held-out splits".into());
    }
    let mut per_round_gaps = Vec::new();
    for round in 1..=multi.config.rounds {
        match (best_at(multi, round), best_at(single, round)) {
            (Some(m), Some(s)) => per_round_gaps.push((round, relative_gap(m, s))),
            _ => return mismatch(format!("round {round} missing from a run")),
        }
    }
    let (m, s) = match (best_final_loss(multi), best_final_loss(single)) {
        (Some(m), Some(s)) => (m, s),
        _ => return mismatch("a run has no server records".into()),
    };
    Ok(Comparison {
        relative_final_loss_gap: relative_gap(m, s),
        per_round_gaps,
        multi_final_loss: m,
        single_final_loss: s,
    })
}
