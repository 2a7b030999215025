//! Independent oracles shared by the integration and acceptance suites.
//!
//! Nothing here calls into the library's numerical code; every value is
//! recomputed from scratch so a bug in the crate cannot hide in its own check.

#![allow(dead_code)]

use fedclf::client::ClientUpdateResult;
use fedclf::model::{ModelParams, ShapeTag};
use fedclf::server::RoundRecord;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Cross-entropy of one sample under softmax regression, straight from the
/// definition: `-log(exp(z_y) / sum_j exp(z_j))` with a max shift.
pub fn softmax_ce(values: &[f64], features: usize, classes: usize, x: &[f64], y: usize) -> f64 {
    let mut z = vec![0.0; classes];
    for c in 0..classes {
        let mut acc = values[classes * features + c];
        for f in 0..features {
            acc += values[c * features + f] * x[f];
        }
        z[c] = acc;
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for v in &z {
        denom += (v - m).exp();
    }
    -(z[y] - m) + denom.ln()
}

/// `sum_k n_k w_k / sum_k n_k`, in input order with a single final division.
pub fn weighted_average(results: &[ClientUpdateResult]) -> Vec<f64> {
    let len = results[0].new_params.values().len();
    let mut num = vec![0.0; len];
    let mut den = 0.0;
    for r in results {
        den += r.n_k as f64;
        for (i, v) in r.new_params.values().iter().enumerate() {
            num[i] += r.n_k as f64 * v;
        }
    }
    num.into_iter().map(|v| v / den).collect()
}

/// Mean of entries `max(1, r - n + 1) ..= r` (1-based), by explicit loop.
pub fn window_mean(acc: &[f64], r: usize, n: usize) -> f64 {
    let start = if r > n { r - n + 1 } else { 1 };
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut i = start;
    while i <= r {
        sum += acc[i - 1];
        count += 1;
        i += 1;
    }
    sum / count as f64
}

pub fn random_result(rng: &mut ChaCha8Rng, client_id: usize, shape: ShapeTag) -> ClientUpdateResult {
    let values: Vec<f64> = (0..shape.param_count())
        .map(|_| rng.random_range(-10.0..10.0))
        .collect();
    let n_k = rng.random_range(1..=1000);
    ClientUpdateResult {
        client_id,
        new_params: ModelParams::new(shape, values).unwrap(),
        loss_utility: 0.0,
        mean_loss: 0.0,
        grad_norm_utility: None,
        n_k,
        post_train_loss: 0.0,
        weight_delta_norm: 0.0,
    }
}

/// Checks that each gated round reopened selection exactly when accuracy
/// strictly fell, and that frozen rounds kept the previous cohort.
///
/// Returns the number of gated rounds checked.
pub fn audit_gate(history: &[RoundRecord], warmup_len: usize) -> Result<usize, String> {
    let mut checked = 0;
    for (i, rec) in history.iter().enumerate() {
        let r = i + 1;
        if rec.round != r {
            return Err(format!("record {i} carries round {}", rec.round));
        }
        if r < 3 || r <= warmup_len {
            if !rec.selection_ran {
                return Err(format!("round {r} skipped selection before the gate applies"));
            }
            continue;
        }
        let dropped = history[r - 2].test_accuracy < history[r - 3].test_accuracy;
        if rec.selection_ran != dropped {
            return Err(format!(
                "round {r}: selection_ran={} but acc[r-1]={} acc[r-2]={}",
                rec.selection_ran,
                history[r - 2].test_accuracy,
                history[r - 3].test_accuracy
            ));
        }
        if !rec.selection_ran && rec.selected_ids != history[r - 2].selected_ids {
            return Err(format!("frozen round {r} changed its cohort"));
        }
        checked += 1;
    }
    Ok(checked)
}

/// Rebuilds round records from a `run_log.csv` payload.
pub fn parse_run_log(text: &str) -> Vec<RoundRecord> {
    text.lines()
        .skip(1)
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            RoundRecord {
                round: f[0].parse().unwrap(),
                test_accuracy: f[1].parse().unwrap(),
                test_loss: f[2].parse().unwrap(),
                moving_avg_accuracy: f[3].parse().unwrap(),
                selection_ran: f[4] == "1",
                selected_ids: f[5].split(';').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap()).collect(),
                elapsed_s: f[6].parse().unwrap(),
            }
        })
        .collect()
}
