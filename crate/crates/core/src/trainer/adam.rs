//! Adaptive moment optimizer with bias correction. The moment buffers are
//! checkpointable so interrupted runs continue bit-exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint::Section;
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Completed update count; bias correction uses t+1 internally.
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update from the gradients accumulated in `store`. The
    /// gradients are left in place; the caller decides when to clear them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            let n = p.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::Shape(format!(
                    "optimizer state for {name} has {} entries, param has {n}",
                    m.len()
                )));
            }
            for i in 0..n {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as checkpoint sections, names prefixed `adam.m.` and
    /// `adam.v.`.
    pub fn sections<'a>(&'a self, shapes: &'a BTreeMap<String, Vec<usize>>) -> Vec<Section<'a>> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (which, buf) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in buf {
                let shape = shapes.get(name).map(|s| &s[..]).unwrap_or(&[]);
                out.push(Section { name: format!("adam.{which}.{name}"), shape, data });
            }
        }
        out
    }

    pub fn from_parts(
        cfg: AdamConfig,
        t: u64,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    ) -> Self {
        Adam { cfg, t, m, v }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Vec<f32>>, &BTreeMap<String, Vec<f32>>) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, data: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let shape = [data.len()];
        s.insert(name, &shape, data).unwrap();
        s
    }

    fn set_grad(store: &mut ParamStore, name: &str, g: &[f32]) {
        store.zero_grads();
        store.add_grad(name, g).unwrap();
    }

    #[test]
    fn constant_gradients_move_at_the_learning_rate() {
        // with g fixed, both bias-corrected moments equal g and g^2 exactly,
        // so every step is lr * g / (|g| + eps)
        let cfg = AdamConfig { lr: 0.1, beta1: 0.5, beta2: 0.75, eps: 1e-8 };
        let mut store = store_with("w", vec![1.0, -2.0]);
        let mut opt = Adam::new(cfg);
        for _ in 0..3 {
            set_grad(&mut store, "w", &[2.0, -0.5]);
            opt.step(&mut store).unwrap();
        }
        let p = store.get("w").unwrap();
        assert!((p.data[0] - 0.7).abs() < 1e-5, "{}", p.data[0]);
        assert!((p.data[1] - -1.7).abs() < 1e-5, "{}", p.data[1]);
        assert_eq!(opt.t, 3);
    }

    #[test]
    fn varying_gradients_match_a_double_precision_reference() {
        let cfg = AdamConfig::default();
        let grads = [[1.0f32, -0.5], [-0.25, 2.0], [0.75, 0.0]];
        let mut store = store_with("w", vec![0.5, -0.5]);
        let mut opt = Adam::new(cfg);
        for g in &grads {
            set_grad(&mut store, "w", g);
            opt.step(&mut store).unwrap();
        }

        let (mut x, mut m, mut v) = ([0.5f64, -0.5], [0.0f64; 2], [0.0f64; 2]);
        let (b1, b2, lr, eps) = (0.9f64, 0.999, 1e-3, 1e-8);
        for (t, g) in grads.iter().enumerate() {
            for i in 0..2 {
                let gi = g[i] as f64;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / (1.0 - b1.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - b2.powi(t as i32 + 1));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let p = store.get("w").unwrap();
        for i in 0..2 {
            assert!((p.data[i] as f64 - x[i]).abs() < 1e-6, "{} vs {}", p.data[i], x[i]);
        }
    }

    #[test]
    fn zero_gradient_leaves_the_param_still() {
        let mut store = store_with("w", vec![3.0]);
        let mut opt = Adam::new(AdamConfig::default());
        set_grad(&mut store, "w", &[0.0]);
        opt.step(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().data[0], 3.0);
    }

    #[test]
    fn bad_configs_are_rejected() {
        assert!(AdamConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::default().validate().is_ok());
    }
}
