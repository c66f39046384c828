//! Named parameter store: flat f32 buffers keyed by dotted names, with
//! gradient accumulators and deterministic per-name initialization.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// U(-limit, limit).
    Uniform { limit: f32 },
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0]; the layout
    /// for weights is [in, out].
    FanIn,
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// All trainable state of a model. Iteration order is the name order, so
/// identical stores serialize identically.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "param {name}: data has {} elements, shape {:?} wants {}",
                data.len(),
                shape,
                numel
            )));
        }
        if self.map.contains_key(name) {
            return Err(Error::Contract(format!("param {name} already exists")));
        }
        self.map.insert(
            name.to_string(),
            Param { grad: vec![0.0; numel], data, shape: shape.to_vec() },
        );
        Ok(())
    }

    /// Insert a freshly initialized parameter. The RNG stream depends only
    /// on (name, seed), so adding or reordering other parameters never
    /// shifts this one's values.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<()> {
        let numel: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::Uniform { limit } => {
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name) ^ seed);
                (0..numel).map(|_| rng.random_range(-limit..limit)).collect()
            }
            Init::FanIn => {
                let limit = 1.0 / (shape[0].max(1) as f32).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(name) ^ seed);
                (0..numel).map(|_| rng.random_range(-limit..limit)).collect()
            }
        };
        self.insert(name, shape, data)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown param {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown param {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.map.values().map(|p| p.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn add_grad(&mut self, name: &str, grad: &[f32]) -> Result<()> {
        let p = self.get_mut(name)?;
        if grad.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "grad for {name} has {} elements, param has {}",
                grad.len(),
                p.data.len()
            )));
        }
        for (a, &g) in p.grad.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    /// Bind every parameter as a grad-requiring leaf on `tape`.
    pub fn bind_all(&self, tape: &mut Tape) -> Result<Bound> {
        let mut map = BTreeMap::new();
        for (name, p) in &self.map {
            let t = tape.leaf(p.data.clone(), &p.shape, true)?;
            map.insert(name.clone(), t);
        }
        Ok(Bound { map })
    }
}

/// Name-to-tensor mapping for one tape built by [`ParamStore::bind_all`].
pub struct Bound {
    map: BTreeMap<String, Tensor>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("param {name} not bound on this tape")))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    /// Accumulate tape gradients back into the store. Parameters the loss
    /// never touched are left alone.
    pub fn export_grads(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.map {
            if let Some(g) = tape.grad(t) {
                store.add_grad(name, g)?;
            }
        }
        Ok(())
    }
}
