//! Per-record converters for the public Amazon Electronics dumps.
//! Downloading and unpacking the dumps is out of scope; these document the
//! field mapping and turn already-extracted JSON lines into our records.
//!
//! Reviews: reviewerID -> user_id, asin -> item_id, unixReviewTime -> ts.
//! Behavior is fixed to click: the dumps carry no cart or conversion events.
//!
//! Metadata: asin -> item_id, brand -> brand (categorical), price -> price
//! (numerical), last entry of the first categories path -> category
//! (categorical). Vector features require a separate embedding pass.

use serde_json::Value;

use super::types::{Behavior, FeatureValue, Interaction, ItemRecord};
use crate::error::{Error, Result};

fn str_field(v: &Value, key: &str) -> Result<String> {
    v.get(key)
        .and_then(Value::as_str)
        .map(String::from)
        .ok_or_else(|| Error::Data(format!("amazon record lacks string field {key}")))
}

pub fn review_to_interaction(line: &str) -> Result<Interaction> {
    let v: Value =
        serde_json::from_str(line).map_err(|e| Error::Data(format!("amazon review: {e}")))?;
    let ts = v
        .get("unixReviewTime")
        .and_then(Value::as_i64)
        .ok_or_else(|| Error::Data("amazon record lacks unixReviewTime".into()))?;
    Ok(Interaction {
        user_id: str_field(&v, "reviewerID")?,
        item_id: str_field(&v, "asin")?,
        ts,
        behavior: Behavior::Click,
    })
}

pub fn metadata_to_item(line: &str) -> Result<ItemRecord> {
    let v: Value =
        serde_json::from_str(line).map_err(|e| Error::Data(format!("amazon metadata: {e}")))?;
    let mut rec = ItemRecord { item_id: str_field(&v, "asin")?, features: Default::default() };
    if let Some(b) = v.get("brand").and_then(Value::as_str) {
        rec.features.insert("brand".into(), FeatureValue::Text(b.into()));
    }
    if let Some(p) = v.get("price").and_then(Value::as_f64) {
        rec.features.insert("price".into(), FeatureValue::Number(p as f32));
    }
    if let Some(leaf) = v
        .get("categories")
        .and_then(|c| c.get(0))
        .and_then(|path| path.as_array())
        .and_then(|path| path.last())
        .and_then(Value::as_str)
    {
        rec.features.insert("category".into(), FeatureValue::Text(leaf.into()));
    }
    Ok(rec)
}
