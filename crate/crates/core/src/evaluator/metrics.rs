use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub median_rank: f64,
    pub acc_at_1: f64,
    pub acc_at_10: f64,
    pub acc_at_100: f64,
    pub n_queries: usize,
}

/// Median (mean of the middle pair for even counts) and Acc@1/10/100 of
/// 1-based ranks.
pub fn compute_metrics(ranks: &[usize]) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let acc = |k: usize| sorted.partition_point(|&r| r <= k) as f64 / n as f64;
    Ok(Metrics {
        median_rank,
        acc_at_1: acc(1),
        acc_at_10: acc(10),
        acc_at_100: acc(100),
        n_queries: n,
    })
}

/// Field-wise arithmetic mean, accumulated as offsets from the first entry
/// so that identical inputs return that entry unchanged. `n_queries` is
/// taken from the first entry.
pub fn mean_metrics(all: &[Metrics]) -> Result<Metrics, EvalError> {
    let first = all.first().ok_or(EvalError::NoQueries)?;
    let n = all.len() as f64;
    let mean = |f: fn(&Metrics) -> f64| f(first) + all.iter().map(|m| f(m) - f(first)).sum::<f64>() / n;
    Ok(Metrics {
        median_rank: mean(|m| m.median_rank),
        acc_at_1: mean(|m| m.acc_at_1),
        acc_at_10: mean(|m| m.acc_at_10),
        acc_at_100: mean(|m| m.acc_at_100),
        n_queries: first.n_queries,
    })
}
