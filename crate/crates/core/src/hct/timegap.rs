//! Time-gap bucketing for the attention bias: gaps are compressed
//! logarithmically so recent history gets fine resolution and distant
//! history is pooled.

/// `min(floor(log2(1 + delta)), buckets - 1)`, with negative deltas clamped
/// to zero. Gap 0 is bucket 0, 1s is bucket 1, a minute is bucket 5, and
/// everything beyond `2^(buckets-1) - 1` shares the last bucket.
pub fn bucket(delta: i64, buckets: usize) -> usize {
    let x = 1 + delta.max(0) as u64;
    let b = (63 - x.leading_zeros()) as usize;
    b.min(buckets - 1)
}

/// Bucket ids for every (query, key) pair of a `t * k`-token stream, row
/// major. The gap depends only on the two item timestamps, so all k*k token
/// pairs of an item pair share one id, as do all attention heads.
pub fn gap_ids(ts: &[i64], k: usize, buckets: usize) -> Vec<usize> {
    let l = ts.len() * k;
    let mut ids = Vec::with_capacity(l * l);
    for p in 0..l {
        let tp = ts[p / k];
        for q in 0..l {
            ids.push(bucket(tp - ts[q / k], buckets));
        }
    }
    ids
}
