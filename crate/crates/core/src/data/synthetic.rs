//! Synthetic corpus with a planted cross-feature, cross-item rule: the next
//! item's category is a table lookup on (category of the previous item,
//! brand of the item before that), so the pattern is learnable only with
//! access to both features across positions. The generator also writes its
//! rule table so oracle rankings can be computed independently of any model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{Behavior, FeatureValue, Interaction, ItemRecord};
use crate::error::{Error, Result};
use crate::htfl::{FeatureKind, FeatureSchema, FeatureSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_items: usize,
    pub n_users: usize,
    pub n_categories: usize,
    pub n_brands: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Zipf exponent for item popularity within a category.
    pub zipf_s: f64,
    /// Probability that a step ignores the rule and draws uniformly.
    pub noise: f64,
    pub d_v: usize,
    pub n_clusters: usize,
    pub price_bins: usize,
    pub vis_groups: usize,
    pub vis_levels: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_items: 1000,
            n_users: 5000,
            n_categories: 50,
            n_brands: 10,
            len_min: 8,
            len_max: 16,
            zipf_s: 1.1,
            noise: 0.2,
            d_v: 8,
            n_clusters: 16,
            price_bins: 8,
            vis_groups: 4,
            vis_levels: 4,
            seed: 17,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 || self.n_items < self.n_categories {
            return Err(Error::Config(format!(
                "{} items cannot cover {} categories",
                self.n_items, self.n_categories
            )));
        }
        if self.n_brands == 0 || self.n_users == 0 || self.n_clusters == 0 {
            return Err(Error::Config("brands, users, and clusters must be positive".into()));
        }
        if self.len_min < 2 || self.len_max < self.len_min {
            return Err(Error::Config(format!(
                "sequence lengths need 2 <= len_min <= len_max, got {}..{}",
                self.len_min, self.len_max
            )));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise rate {} outside [0, 1]", self.noise)));
        }
        if self.zipf_s <= 0.0 {
            return Err(Error::Config(format!("zipf exponent {} must be positive", self.zipf_s)));
        }
        if self.d_v == 0 || self.vis_groups == 0 || self.d_v % self.vis_groups != 0 {
            return Err(Error::Config(format!(
                "vector width {} must split into {} equal groups",
                self.d_v, self.vis_groups
            )));
        }
        if self.price_bins < 2 || self.vis_levels < 2 {
            return Err(Error::Config("price_bins and vis_levels need at least 2".into()));
        }
        Ok(())
    }

    /// The schema matching this corpus's four features.
    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema {
            features: vec![
                FeatureSpec { name: "category".into(), kind: FeatureKind::Categorical },
                FeatureSpec { name: "brand".into(), kind: FeatureKind::Categorical },
                FeatureSpec {
                    name: "price".into(),
                    kind: FeatureKind::Numerical { bins: self.price_bins },
                },
                FeatureSpec {
                    name: "vis".into(),
                    kind: FeatureKind::Multimodal {
                        dim: self.d_v,
                        groups: self.vis_groups,
                        levels: self.vis_levels,
                    },
                },
            ],
        }
    }
}

/// Everything the generator planted, enough to reconstruct the posterior
/// over next items without touching a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub spec: SyntheticSpec,
    pub item_category: Vec<usize>,
    pub item_brand: Vec<usize>,
    pub item_weight: Vec<f64>,
    /// transition[category][brand] -> next category.
    pub transition: Vec<Vec<usize>>,
}

impl RuleFile {
    /// Context features the rule conditions on, given the interaction
    /// prefix: category of the newest item and brand of the one before it
    /// (the newest again when only one item exists).
    pub fn context_for(&self, prefix: &[usize]) -> Result<(usize, usize)> {
        let last = *prefix.last().ok_or_else(|| Error::Data("empty prefix".into()))?;
        let prev = if prefix.len() >= 2 { prefix[prefix.len() - 2] } else { last };
        Ok((self.item_category[last], self.item_brand[prev]))
    }

    /// Exact posterior P(next = i | context), mixing the planted rule with
    /// the uniform noise floor.
    pub fn posterior(&self, prev_cat: usize, prev2_brand: usize) -> Vec<f64> {
        let n = self.item_category.len();
        let target = self.transition[prev_cat][prev2_brand];
        let w_target: f64 = (0..n)
            .filter(|&i| self.item_category[i] == target)
            .map(|i| self.item_weight[i])
            .sum();
        let noise = self.spec.noise;
        (0..n)
            .map(|i| {
                let hit = if self.item_category[i] == target {
                    (1.0 - noise) * self.item_weight[i] / w_target
                } else {
                    0.0
                };
                hit + noise / n as f64
            })
            .collect()
    }

    /// Items ranked by posterior probability, ties toward the smaller index.
    pub fn bayes_ranking(&self, prev_cat: usize, prev2_brand: usize) -> Vec<usize> {
        let post = self.posterior(prev_cat, prev2_brand);
        let mut order: Vec<usize> = (0..post.len()).collect();
        order.sort_by(|&a, &b| post[b].total_cmp(&post[a]).then(a.cmp(&b)));
        order
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<Interaction>,
    pub rule: RuleFile,
}

/// Cumulative weights; `draw` inverts a uniform sample through them.
fn cdf(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn draw(cdf: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random::<f64>() * cdf.last().copied().unwrap_or(1.0);
    cdf.partition_point(|&x| x <= u).min(cdf.len() - 1)
}

/// Pure function of the spec: one seeded stream drawn in a fixed order
/// (cluster centers, per-item attributes, rule table, then sequences).
pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_items;

    let centers: Vec<Vec<f32>> = (0..spec.n_clusters)
        .map(|_| (0..spec.d_v).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect();

    let mut items = Vec::with_capacity(n);
    let mut item_category = Vec::with_capacity(n);
    let mut item_brand = Vec::with_capacity(n);
    let mut item_weight = Vec::with_capacity(n);
    for i in 0..n {
        let cat = i % spec.n_categories;
        let rank = i / spec.n_categories;
        let brand = rng.random_range(0..spec.n_brands);
        let price: f32 = rng.random_range(1.0..100.0);
        let vis: Vec<f32> = centers[cat % spec.n_clusters]
            .iter()
            .map(|&c| c + 0.1 * rng.random_range(-1.0f32..1.0))
            .collect();
        let mut features = std::collections::BTreeMap::new();
        features.insert("category".to_string(), FeatureValue::Text(format!("c{cat}")));
        features.insert("brand".to_string(), FeatureValue::Text(format!("b{brand}")));
        features.insert("price".to_string(), FeatureValue::Number(price));
        features.insert("vis".to_string(), FeatureValue::Vector(vis));
        items.push(ItemRecord { item_id: format!("i{i:06}"), features });
        item_category.push(cat);
        item_brand.push(brand);
        item_weight.push((1.0 + rank as f64).powf(-spec.zipf_s));
    }

    let transition: Vec<Vec<usize>> = (0..spec.n_categories)
        .map(|_| (0..spec.n_brands).map(|_| rng.random_range(0..spec.n_categories)).collect())
        .collect();

    let members: Vec<Vec<usize>> = {
        let mut m = vec![Vec::new(); spec.n_categories];
        for i in 0..n {
            m[item_category[i]].push(i);
        }
        m
    };
    let category_cdf: Vec<Vec<f64>> = members
        .iter()
        .map(|ids| cdf(&ids.iter().map(|&i| item_weight[i]).collect::<Vec<_>>()))
        .collect();

    let rule = RuleFile { spec: spec.clone(), item_category, item_brand, item_weight, transition };

    let mut interactions = Vec::new();
    for u in 0..spec.n_users {
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let user_id = format!("u{u:05}");
        let mut ts = 1_600_000_000 + (u as i64) * 1_000;
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        for t in 0..len {
            let item = if t == 0 {
                rng.random_range(0..n)
            } else {
                let (c, b) = rule.context_for(&seq)?;
                if rng.random::<f64>() < spec.noise {
                    rng.random_range(0..n)
                } else {
                    let target = rule.transition[c][b];
                    members[target][draw(&category_cdf[target], &mut rng)]
                }
            };
            seq.push(item);
            ts += rng.random_range(30..90);
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: format!("i{item:06}"),
                ts,
                behavior: Behavior::Click,
            });
        }
    }

    Ok(Synthetic { items, interactions, rule })
}
