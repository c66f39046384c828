//! Retrieval metrics: full-catalog inner-product scoring, Recall@N and
//! nDCG@N under the one-held-out-item protocol, and the popularity
//! baseline the synthetic studies compare against.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::types::Session;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub users_evaluated: usize,
    pub catalog_size: usize,
}

/// Rank catalog indices by descending inner product with `user`. Ties break
/// toward the lexicographically smaller item id so rankings are bit-stable
/// across runs.
pub fn score_catalog(user: &[f32], catalog: &[f32], ids: &[String]) -> Result<Vec<usize>> {
    let d = user.len();
    if d == 0 || catalog.is_empty() {
        return Err(Error::Data("scoring needs a non-empty catalog and embedding".into()));
    }
    if catalog.len() % d != 0 || catalog.len() / d != ids.len() {
        return Err(Error::Shape(format!(
            "catalog of {} floats with {} ids does not factor into width {}",
            catalog.len(),
            ids.len(),
            d
        )));
    }
    let n = ids.len();
    let scores: Vec<f32> = (0..n)
        .map(|i| {
            let row = &catalog[i * d..(i + 1) * d];
            row.iter().zip(user).map(|(a, b)| a * b).sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    Ok(order)
}

/// 1-based position of `truth` in the ranking, if present.
pub fn rank_of(ranked: &[usize], truth: usize) -> Option<usize> {
    ranked.iter().position(|&i| i == truth).map(|p| p + 1)
}

pub fn recall_at_n(ranked: &[usize], truth: usize, n: usize) -> f64 {
    match rank_of(ranked, truth) {
        Some(r) if r <= n => 1.0,
        _ => 0.0,
    }
}

/// Single-relevant-item nDCG: 1/log2(rank+1) inside the cutoff, else 0.
/// The ideal DCG is 1, so no further normalization applies.
pub fn ndcg_at_n(ranked: &[usize], truth: usize, n: usize) -> f64 {
    match rank_of(ranked, truth) {
        Some(r) if r <= n => 1.0 / ((r + 1) as f64).log2(),
        _ => 0.0,
    }
}

/// Mean metrics over users from precomputed rankings.
pub fn aggregate(
    rankings: &[Vec<usize>],
    truths: &[usize],
    cutoffs: &[usize],
    catalog_size: usize,
) -> Result<EvalReport> {
    if rankings.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} rankings for {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::Data("no users to evaluate".into()));
    }
    if cutoffs.is_empty() || cutoffs.iter().any(|&n| n == 0) {
        return Err(Error::Config("cutoffs must be positive".into()));
    }
    for &t in truths {
        if t >= catalog_size {
            return Err(Error::Index { index: t, len: catalog_size, what: "truth item".into() });
        }
    }
    let users = rankings.len() as f64;
    let mut recall = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &n in cutoffs {
        let mut r = 0.0;
        let mut g = 0.0;
        for (ranked, &truth) in rankings.iter().zip(truths) {
            r += recall_at_n(ranked, truth, n);
            g += ndcg_at_n(ranked, truth, n);
        }
        recall.insert(n, r / users);
        ndcg.insert(n, g / users);
    }
    Ok(EvalReport {
        cutoffs: cutoffs.to_vec(),
        recall,
        ndcg,
        users_evaluated: rankings.len(),
        catalog_size,
    })
}

/// Items ranked by training interaction count, ties toward the smaller
/// index. The no-model baseline for the synthetic studies.
pub fn popularity_ranking(sessions: &[Session], n_items: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_items];
    for s in sessions {
        for &i in &s.items {
            counts[i] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n_items).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order
}
