//! Catalog and interaction types shared by ingestion, tokenization,
//! training, and evaluation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One feature value as it appears in catalog JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Text(String),
    Number(f32),
    Vector(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub features: BTreeMap<String, FeatureValue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Click,
    AddToCart,
    Conversion,
}

/// Stored for all behaviors; the default schema does not feed the behavior
/// into the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub ts: i64,
    #[serde(default)]
    pub behavior: Behavior,
}

/// All items, indexable by position or by id.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: Vec<ItemRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn from_records(records: Vec<ItemRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.item_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate item_id {}", r.item_id)));
            }
        }
        Ok(Catalog { items: records, index })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, idx: usize) -> &ItemRecord {
        &self.items[idx]
    }

    pub fn lookup(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter()
    }
}

/// One user's interaction history, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub user_id: String,
    /// Catalog indices, oldest first.
    pub items: Vec<usize>,
    pub ts: Vec<i64>,
    pub behaviors: Vec<Behavior>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Group interactions into per-user sessions sorted by time, breaking ties
/// by item id so any input order yields the same sessions. The session list
/// is sorted by user id.
pub fn build_sessions(catalog: &Catalog, interactions: &[Interaction]) -> Result<Vec<Session>> {
    let mut by_user: BTreeMap<&str, Vec<(i64, &str, usize, Behavior)>> = BTreeMap::new();
    for it in interactions {
        let idx = catalog.lookup(&it.item_id).ok_or_else(|| {
            Error::Data(format!(
                "interaction for user {} references unknown item {}",
                it.user_id, it.item_id
            ))
        })?;
        by_user.entry(&it.user_id).or_default().push((it.ts, &it.item_id, idx, it.behavior));
    }
    let mut sessions = Vec::with_capacity(by_user.len());
    for (user, mut events) in by_user {
        events.sort_by_key(|&(ts, id, _, _)| (ts, id));
        sessions.push(Session {
            user_id: user.to_string(),
            items: events.iter().map(|&(_, _, i, _)| i).collect(),
            ts: events.iter().map(|&(t, _, _, _)| t).collect(),
            behaviors: events.iter().map(|&(_, _, _, b)| b).collect(),
        });
    }
    Ok(sessions)
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sessions: Vec<Session>,
}
