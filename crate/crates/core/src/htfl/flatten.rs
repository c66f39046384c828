//! Turns a window of tokenized items into the model's input stream: one
//! embedding row per token, item-major, with a feature-type embedding added
//! to every token.

use crate::error::{Error, Result};
use crate::numerics::{Bound, Init, ParamStore, Tape, Tensor};

use super::codebook::{Codebook, ItemTokens, TokenCode};
use super::schema::FeatureKind;

pub const TYPE_TABLE: &str = "htfl.type.table";

pub fn table_name(feature: &str) -> String {
    format!("htfl.{feature}.table")
}

pub fn group_table_name(feature: &str, group: usize) -> String {
    format!("htfl.{feature}.g{group}.table")
}

pub fn proj_w_name(feature: &str) -> String {
    format!("htfl.{feature}.proj.w")
}

pub fn proj_b_name(feature: &str) -> String {
    format!("htfl.{feature}.proj.b")
}

/// Register every embedding table this codebook needs. With
/// `quantize_multimodal` off, multimodal features get a learned linear
/// projection of the raw vector instead of group tables.
pub fn register_params(
    store: &mut ParamStore,
    cb: &Codebook,
    d_f: usize,
    quantize_multimodal: bool,
    seed: u64,
) -> Result<()> {
    cb.schema.validate(d_f)?;
    let k = cb.schema.tokens_per_item();
    store.init(TYPE_TABLE, &[k, d_f], Init::Uniform { limit: 0.1 }, seed)?;
    for (i, f) in cb.schema.features.iter().enumerate() {
        match &f.kind {
            FeatureKind::Categorical | FeatureKind::Numerical { .. } => {
                store.init(
                    &table_name(&f.name),
                    &[cb.table_rows(i), d_f],
                    Init::Uniform { limit: 0.1 },
                    seed,
                )?;
            }
            FeatureKind::Multimodal { dim, groups, .. } => {
                if quantize_multimodal {
                    for g in 0..*groups {
                        store.init(
                            &group_table_name(&f.name, g),
                            &[cb.table_rows(i), d_f / groups],
                            Init::Uniform { limit: 0.1 },
                            seed,
                        )?;
                    }
                } else {
                    store.init(&proj_w_name(&f.name), &[*dim, d_f], Init::FanIn, seed)?;
                    store.init(&proj_b_name(&f.name), &[d_f], Init::Zeros, seed)?;
                }
            }
        }
    }
    Ok(())
}

fn single_ids(tokens: &[&ItemTokens], feat: usize, what: &str) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| match &t.feats[feat] {
            TokenCode::Id(id) => Ok(*id as usize),
            TokenCode::Groups { .. } => Err(Error::Contract(format!(
                "feature {what} carries group codes but the schema wants a single id"
            ))),
        })
        .collect()
}

fn group_ids(tokens: &[&ItemTokens], feat: usize, group: usize, what: &str) -> Result<Vec<usize>> {
    tokens
        .iter()
        .map(|t| match &t.feats[feat] {
            TokenCode::Groups { codes, .. } => Ok(codes[group] as usize),
            TokenCode::Id(_) => Err(Error::Contract(format!(
                "feature {what} carries a single id but the schema wants group codes"
            ))),
        })
        .collect()
}

fn raw_matrix(tokens: &[&ItemTokens], feat: usize, dim: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(tokens.len() * dim);
    for t in tokens {
        match &t.feats[feat] {
            TokenCode::Groups { raw, .. } => out.extend_from_slice(raw),
            TokenCode::Id(_) => {
                return Err(Error::Contract(format!(
                    "feature {what} carries a single id but the raw vector is needed"
                )))
            }
        }
    }
    Ok(out)
}

/// Per-item feature embeddings, concatenated: `[T, K*d_f]`. Row t holds
/// item t's K token embeddings side by side in schema order.
pub fn embed_concat(
    tape: &mut Tape,
    bound: &Bound,
    cb: &Codebook,
    tokens: &[&ItemTokens],
    quantize_multimodal: bool,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot flatten an empty window".into()));
    }
    let type_table = bound.get(TYPE_TABLE)?;
    let mut cols = Vec::with_capacity(cb.schema.features.len());
    for (i, f) in cb.schema.features.iter().enumerate() {
        let emb = match &f.kind {
            FeatureKind::Categorical | FeatureKind::Numerical { .. } => {
                let table = bound.get(&table_name(&f.name))?;
                let ids = single_ids(tokens, i, &f.name)?;
                tape.gather_rows(&table, &ids)?
            }
            FeatureKind::Multimodal { dim, groups, .. } => {
                if quantize_multimodal {
                    let mut parts = Vec::with_capacity(*groups);
                    for g in 0..*groups {
                        let table = bound.get(&group_table_name(&f.name, g))?;
                        let ids = group_ids(tokens, i, g, &f.name)?;
                        parts.push(tape.gather_rows(&table, &ids)?);
                    }
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    tape.concat_cols(&refs)?
                } else {
                    let raw = raw_matrix(tokens, i, *dim, &f.name)?;
                    let x = tape.constant(raw, &[tokens.len(), *dim])?;
                    let w = bound.get(&proj_w_name(&f.name))?;
                    let b = bound.get(&proj_b_name(&f.name))?;
                    let proj = tape.matmul(&x, &w)?;
                    tape.add_bias(&proj, &b)?
                }
            }
        };
        let ty = tape.gather_rows(&type_table, &[i])?;
        cols.push(tape.add_bias(&emb, &ty)?);
    }
    let refs: Vec<&Tensor> = cols.iter().collect();
    tape.concat_cols(&refs)
}

/// Item-major token stream `[T*K, d_f]`: row `t*K + s` is feature s of
/// item t. The row-major reshape of [`embed_concat`] gives exactly that.
pub fn flatten_window(
    tape: &mut Tape,
    bound: &Bound,
    cb: &Codebook,
    tokens: &[&ItemTokens],
    d_f: usize,
    quantize_multimodal: bool,
) -> Result<Tensor> {
    let k = cb.schema.tokens_per_item();
    let concat = embed_concat(tape, bound, cb, tokens, quantize_multimodal)?;
    tape.reshape(&concat, &[tokens.len() * k, d_f])
}
