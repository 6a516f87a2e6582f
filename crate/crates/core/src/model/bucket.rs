/// Maps a signed token distance (`key_pos - query_pos`) to a relative
/// position bucket.
///
/// Bidirectional: the upper half of the buckets holds positive distances.
/// Within a half, distances below `half / 2` get their own bucket and larger
/// ones are log-spaced up to `max_distance`, clamped to the half's last
/// bucket. Unidirectional (causal): only non-positive distances are bucketed;
/// keys after the query fall into bucket 0.
pub fn relative_position_bucket(
    relative_distance: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut base = 0;
    let n: u64 = if bidirectional {
        buckets /= 2;
        if relative_distance > 0 {
            base = buckets;
        }
        relative_distance.unsigned_abs()
    } else {
        (-relative_distance).max(0) as u64
    };
    let max_exact = (buckets / 2).max(1);
    if (n as usize) < max_exact {
        return base + n as usize;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f64) as usize;
    base + large.min(buckets - 1)
}

/// Bucket index for every (query, key) pair, row-major `[q_len, k_len]`.
pub fn bucket_matrix(
    q_len: usize,
    k_len: usize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(q_len * k_len);
    for q in 0..q_len {
        for k in 0..k_len {
            out.push(relative_position_bucket(
                k as i64 - q as i64,
                bidirectional,
                num_buckets,
                max_distance,
            ));
        }
    }
    out
}
