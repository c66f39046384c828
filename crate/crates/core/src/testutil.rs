//! Small shared fixtures for unit tests: a six-item catalog with one
//! feature of each kind and a model sized to train in milliseconds.

use crate::data::types::{Catalog, FeatureValue, ItemRecord};
use crate::htfl::codebook::{Codebook, ItemTokens};
use crate::model::{Ablation, Model, ModelConfig};
use crate::htfl::schema::{FeatureKind, FeatureSchema, FeatureSpec};

pub fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        d_f: 8,
        d_k: 8,
        heads: 2,
        n1: 1,
        n2: 1,
        ffn_mult: 2,
        t_max: 6,
        n_step: 2,
        tau: 0.5,
        lambda_m: 0.2,
        time_buckets: 8,
        ln_eps: 1e-5,
        bias_inside_scale: true,
        ablation: Ablation::default(),
    }
}

pub fn tiny_schema() -> FeatureSchema {
    FeatureSchema {
        features: vec![
            FeatureSpec { name: "category".into(), kind: FeatureKind::Categorical },
            FeatureSpec { name: "price".into(), kind: FeatureKind::Numerical { bins: 3 } },
            FeatureSpec {
                name: "vis".into(),
                kind: FeatureKind::Multimodal { dim: 4, groups: 2, levels: 2 },
            },
        ],
    }
}

pub fn tiny_catalog() -> Catalog {
    let cats = ["tools", "toys", "tools", "games", "toys", "games"];
    let records = (0..6)
        .map(|i| {
            let v: Vec<f32> = (0..4).map(|j| ((i * 4 + j) as f32 * 0.37).sin()).collect();
            ItemRecord {
                item_id: format!("item{i}"),
                features: [
                    ("category".to_string(), FeatureValue::Text(cats[i].to_string())),
                    ("price".to_string(), FeatureValue::Number(1.5 * i as f32 + 0.5)),
                    ("vis".to_string(), FeatureValue::Vector(v)),
                ]
                .into_iter()
                .collect(),
            }
        })
        .collect();
    Catalog::from_records(records).unwrap()
}

pub fn tiny_model(ablation: Ablation) -> (Model, Vec<ItemTokens>) {
    let mut cfg = tiny_cfg();
    cfg.ablation = ablation;
    let catalog = tiny_catalog();
    let cb = Codebook::fit(&tiny_schema(), &catalog).unwrap();
    let tokens = cb.tokenize_catalog(&catalog).unwrap();
    (Model::new(cfg, cb, 7).unwrap(), tokens)
}
