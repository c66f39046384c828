//! Batch assembly: deterministic sampling of per-user training windows.
//! In-batch negatives come from the other windows' targets, so a batch
//! never holds two windows from the same user.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Session;
use crate::error::{Error, Result};

/// One user's training window: the newest `t_max`-capped stretch of the
/// session, split into aligned inputs and next-item targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    /// Index of the source session.
    pub session: usize,
    /// Catalog indices fed to the user tower, oldest first.
    pub inputs: Vec<usize>,
    /// Timestamps aligned with `inputs`.
    pub ts: Vec<i64>,
    /// `targets[t]` is the item after `inputs[t]`; same length as inputs.
    pub targets: Vec<usize>,
}

/// Tail window of a session, or None when it has no target at all.
pub fn window_of(session: &Session, idx: usize, t_max: usize) -> Option<TrainWindow> {
    if session.len() < 2 {
        return None;
    }
    let l = session.len().min(t_max + 1);
    let start = session.len() - l;
    let items = &session.items[start..];
    let ts = &session.ts[start..];
    Some(TrainWindow {
        session: idx,
        inputs: items[..l - 1].to_vec(),
        ts: ts[..l - 1].to_vec(),
        targets: items[1..].to_vec(),
    })
}

pub fn eligible(sessions: &[Session]) -> Vec<usize> {
    (0..sessions.len()).filter(|&i| sessions[i].len() >= 2).collect()
}

const EPOCH_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Sample `b` windows from distinct users without replacement.
pub fn assemble_batch(
    sessions: &[Session],
    t_max: usize,
    b: usize,
    seed: u64,
) -> Result<Vec<TrainWindow>> {
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut pool = eligible(sessions);
    if pool.len() < b {
        return Err(Error::Data(format!(
            "batch of {b} needs that many users with >=2 interactions, found {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..b {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    Ok(pool[..b].iter().map(|&i| window_of(&sessions[i], i, t_max).unwrap()).collect())
}

/// Shuffle all eligible users and cut full batches of `b`; the remainder is
/// dropped so every step sees the same negative count. The shuffle depends
/// only on (seed, epoch), so resumed runs replay the same order.
pub fn epoch_batches(
    sessions: &[Session],
    t_max: usize,
    b: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<TrainWindow>>> {
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut pool = eligible(sessions);
    if pool.len() < b {
        return Err(Error::Data(format!(
            "batch of {b} needs that many users with >=2 interactions, found {}",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(EPOCH_MIX));
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    Ok(pool
        .chunks_exact(b)
        .map(|chunk| {
            chunk.iter().map(|&i| window_of(&sessions[i], i, t_max).unwrap()).collect()
        })
        .collect())
}
