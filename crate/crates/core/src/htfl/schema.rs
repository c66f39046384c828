//! Feature schema: which item features exist, their kinds, and how each is
//! discretized into tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    /// String-valued id feature; unknown values map to a reserved id 0.
    Categorical,
    /// Scalar feature bucketed by fitted quantile boundaries into `bins`
    /// left-closed right-open intervals.
    Numerical { bins: usize },
    /// Dense vector of `dim` floats, split into `groups` equal slices; each
    /// slice is quantized per dimension into `levels` quantile cells and the
    /// cells combine into one code per group.
    Multimodal { dim: usize, groups: usize, levels: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature list; the order fixes each item's token order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    /// Tokens contributed per item: one per feature.
    pub fn tokens_per_item(&self) -> usize {
        self.features.len()
    }

    pub fn feature(&self, name: &str) -> Result<&FeatureSpec> {
        self.features
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Config(format!("schema has no feature {name}")))
    }

    /// Check internal consistency and compatibility with an embedding width.
    pub fn validate(&self, d_f: usize) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("schema needs at least one feature".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.features {
            if !seen.insert(&f.name) {
                return Err(Error::Config(format!("duplicate feature name {}", f.name)));
            }
            match &f.kind {
                FeatureKind::Categorical => {}
                FeatureKind::Numerical { bins } => {
                    if *bins < 2 {
                        return Err(Error::Config(format!(
                            "feature {}: numerical bins must be >= 2, got {bins}",
                            f.name
                        )));
                    }
                }
                FeatureKind::Multimodal { dim, groups, levels } => {
                    if *groups == 0 || *dim == 0 {
                        return Err(Error::Config(format!(
                            "feature {}: dim and groups must be positive",
                            f.name
                        )));
                    }
                    if dim % groups != 0 {
                        return Err(Error::Config(format!(
                            "feature {}: dim {dim} not divisible by groups {groups}",
                            f.name
                        )));
                    }
                    if d_f % groups != 0 {
                        return Err(Error::Config(format!(
                            "feature {}: embedding width {d_f} not divisible by groups {groups}",
                            f.name
                        )));
                    }
                    if *levels < 2 {
                        return Err(Error::Config(format!(
                            "feature {}: levels must be >= 2, got {levels}",
                            f.name
                        )));
                    }
                    let dims_per_group = dim / groups;
                    let cells = (*levels as u64).checked_pow(dims_per_group as u32);
                    match cells {
                        Some(c) if c <= 1 << 20 => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "feature {}: {levels}^{dims_per_group} codes per group is too large",
                                f.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
