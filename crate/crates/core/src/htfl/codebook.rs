//! Fitted tokenization state: categorical vocabularies, numerical bin
//! boundaries, and per-dimension quantile grids for multimodal vectors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::types::{Catalog, FeatureValue, ItemRecord};
use crate::error::{Error, Result};

use super::schema::{FeatureKind, FeatureSchema};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureCodes {
    /// Value -> id, ids starting at 1; id 0 is reserved for unseen values.
    Categorical { vocab: BTreeMap<String, u32> },
    /// Ascending boundaries; value x lands in bin = #{b : b <= x}, so bins
    /// are left-closed right-open.
    Numerical { boundaries: Vec<f32> },
    /// boundaries[d] holds the grid for vector dimension d.
    Multimodal { boundaries: Vec<Vec<f32>> },
}

/// Schema plus everything fitted from a catalog. This is the artifact the
/// prepare step writes and every later stage loads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub schema: FeatureSchema,
    pub codes: Vec<FeatureCodes>,
}

/// Token codes for one item, aligned with the schema's feature order.
#[derive(Debug, Clone, PartialEq)]
pub enum TokenCode {
    /// Categorical or numerical: one row id into that feature's table.
    Id(u32),
    /// Multimodal: one code per group, plus the raw vector for model
    /// variants that bypass quantization.
    Groups { codes: Vec<u32>, raw: Vec<f32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemTokens {
    pub feats: Vec<TokenCode>,
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile(sorted: &[f32], p: f64) -> f32 {
    let n = sorted.len();
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

fn quantile_boundaries(values: &mut Vec<f32>, cells: usize) -> Vec<f32> {
    values.sort_by(f32::total_cmp);
    (1..cells).map(|k| quantile(values, k as f64 / cells as f64)).collect()
}

/// Bin index of x under ascending boundaries: #{b : b <= x}.
pub fn bin_of(x: f32, boundaries: &[f32]) -> usize {
    boundaries.partition_point(|b| *b <= x)
}

fn feature_of<'a>(item: &'a ItemRecord, name: &str) -> Result<&'a FeatureValue> {
    item.features.get(name).ok_or_else(|| {
        Error::Data(format!("item {} is missing feature {name}", item.item_id))
    })
}

fn want_text<'a>(item: &'a ItemRecord, name: &str) -> Result<&'a str> {
    match feature_of(item, name)? {
        FeatureValue::Text(s) => Ok(s),
        other => Err(Error::Data(format!(
            "item {}: feature {name} should be a string, got {other:?}",
            item.item_id
        ))),
    }
}

fn want_number(item: &ItemRecord, name: &str) -> Result<f32> {
    match feature_of(item, name)? {
        FeatureValue::Number(x) if x.is_finite() => Ok(*x),
        other => Err(Error::Data(format!(
            "item {}: feature {name} should be a finite number, got {other:?}",
            item.item_id
        ))),
    }
}

fn want_vector<'a>(item: &'a ItemRecord, name: &str, dim: usize) -> Result<&'a [f32]> {
    match feature_of(item, name)? {
        FeatureValue::Vector(v) if v.len() == dim && v.iter().all(|x| x.is_finite()) => Ok(v),
        other => Err(Error::Data(format!(
            "item {}: feature {name} should be a finite vector of {dim} floats, got {other:?}",
            item.item_id
        ))),
    }
}

impl Codebook {
    /// Fit vocabularies and quantile grids over every catalog item.
    pub fn fit(schema: &FeatureSchema, catalog: &Catalog) -> Result<Self> {
        if catalog.is_empty() {
            return Err(Error::Data("cannot fit a codebook on an empty catalog".into()));
        }
        let mut codes = Vec::with_capacity(schema.features.len());
        for f in &schema.features {
            let entry = match &f.kind {
                FeatureKind::Categorical => {
                    let mut seen = std::collections::BTreeSet::new();
                    for item in catalog.iter() {
                        seen.insert(want_text(item, &f.name)?.to_string());
                    }
                    let vocab = seen
                        .into_iter()
                        .enumerate()
                        .map(|(i, v)| (v, i as u32 + 1))
                        .collect();
                    FeatureCodes::Categorical { vocab }
                }
                FeatureKind::Numerical { bins } => {
                    let mut vals = Vec::with_capacity(catalog.len());
                    for item in catalog.iter() {
                        vals.push(want_number(item, &f.name)?);
                    }
                    FeatureCodes::Numerical { boundaries: quantile_boundaries(&mut vals, *bins) }
                }
                FeatureKind::Multimodal { dim, levels, .. } => {
                    let mut per_dim: Vec<Vec<f32>> = vec![Vec::with_capacity(catalog.len()); *dim];
                    for item in catalog.iter() {
                        let v = want_vector(item, &f.name, *dim)?;
                        for (d, &x) in v.iter().enumerate() {
                            per_dim[d].push(x);
                        }
                    }
                    let boundaries = per_dim
                        .iter_mut()
                        .map(|vals| quantile_boundaries(vals, *levels))
                        .collect();
                    FeatureCodes::Multimodal { boundaries }
                }
            };
            codes.push(entry);
        }
        Ok(Codebook { schema: schema.clone(), codes })
    }

    /// Embedding-table row counts per feature. Categorical tables carry an
    /// extra row 0 for unseen values; multimodal counts are per group.
    pub fn table_rows(&self, feature_idx: usize) -> usize {
        match (&self.schema.features[feature_idx].kind, &self.codes[feature_idx]) {
            (FeatureKind::Categorical, FeatureCodes::Categorical { vocab }) => vocab.len() + 1,
            (FeatureKind::Numerical { bins }, _) => *bins,
            (FeatureKind::Multimodal { dim, groups, levels }, _) => {
                (*levels as u64).pow((dim / groups) as u32) as usize
            }
            _ => unreachable!("codes misaligned with schema"),
        }
    }

    pub fn tokenize(&self, item: &ItemRecord) -> Result<ItemTokens> {
        let mut feats = Vec::with_capacity(self.schema.features.len());
        for (f, codes) in self.schema.features.iter().zip(&self.codes) {
            let code = match (&f.kind, codes) {
                (FeatureKind::Categorical, FeatureCodes::Categorical { vocab }) => {
                    let v = want_text(item, &f.name)?;
                    TokenCode::Id(vocab.get(v).copied().unwrap_or(0))
                }
                (FeatureKind::Numerical { .. }, FeatureCodes::Numerical { boundaries }) => {
                    let x = want_number(item, &f.name)?;
                    TokenCode::Id(bin_of(x, boundaries) as u32)
                }
                (
                    FeatureKind::Multimodal { dim, groups, levels },
                    FeatureCodes::Multimodal { boundaries },
                ) => {
                    let v = want_vector(item, &f.name, *dim)?;
                    let per_group = dim / groups;
                    let mut group_codes = Vec::with_capacity(*groups);
                    for g in 0..*groups {
                        let mut code = 0u64;
                        let mut radix = 1u64;
                        for m in 0..per_group {
                            let d = g * per_group + m;
                            let cell = bin_of(v[d], &boundaries[d]) as u64;
                            code += cell * radix;
                            radix *= *levels as u64;
                        }
                        group_codes.push(code as u32);
                    }
                    TokenCode::Groups { codes: group_codes, raw: v.to_vec() }
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "codebook entry for {} disagrees with its schema kind",
                        f.name
                    )))
                }
            };
            feats.push(code);
        }
        Ok(ItemTokens { feats })
    }

    /// Tokenize the whole catalog, index-aligned with it.
    pub fn tokenize_catalog(&self, catalog: &Catalog) -> Result<Vec<ItemTokens>> {
        catalog.iter().map(|item| self.tokenize(item)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = serde_json::to_string_pretty(self)?;
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}
