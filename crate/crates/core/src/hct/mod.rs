//! Hierarchical causal transformer pieces: masks, time-gap bucketing, and
//! the attention block.

pub mod attention;
pub mod mask;
pub mod timegap;


pub use attention::{register_block, run_block, BlockCfg};
pub use mask::token_causal_mask;
pub use timegap::{bucket, gap_ids};
