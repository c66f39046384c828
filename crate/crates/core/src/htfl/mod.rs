//! Heterogeneous token flattening: schemas, fitted codebooks, and the
//! embedding layer that turns item windows into token streams.

pub mod codebook;
pub mod flatten;
pub mod schema;


pub use codebook::{Codebook, FeatureCodes, ItemTokens, TokenCode};
pub use schema::{FeatureKind, FeatureSchema, FeatureSpec};
