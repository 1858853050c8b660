use std::collections::{BTreeMap, HashMap};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

/// Named parameters plus Adam state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::usage(format!("parameter {name} already exists")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Snapshot of every parameter whose name starts with `prefix`.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Drops optimizer state, keeping parameter values.
    pub fn reset_optimizer(&mut self) {
        self.moments.clear();
        self.step = 0;
    }

    /// One Adam update with bias correction. Parameters absent from `grads`
    /// are left untouched; bias correction uses each parameter's own count of
    /// applied updates.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        if !(cfg.lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient for {name}")));
            }
            let p = self.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            let st = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - cfg.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - cfg.beta2.powi(st.steps as i32);
            for (((w, gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// Which parameters a forward pass should track for gradients.
#[derive(Clone, Debug)]
pub enum Track {
    All,
    None,
    Prefixes(Vec<String>),
}

impl Track {
    pub fn prefixes<S: AsRef<str>>(p: &[S]) -> Self {
        Track::Prefixes(p.iter().map(|s| s.as_ref().to_string()).collect())
    }

    fn tracks(&self, name: &str) -> bool {
        match self {
            Track::All => true,
            Track::None => false,
            Track::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// Places store parameters onto a graph, once per name, as gradient-tracking
/// leaves or constants depending on `track`.
pub struct Binder<'s> {
    store: &'s ParamStore,
    track: Track,
    cache: HashMap<String, NodeId>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, track: Track) -> Self {
        Self {
            store,
            track,
            cache: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.cache.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = if self.track.tracks(name) {
            g.param(name, value)
        } else {
            g.constant(value)
        };
        self.cache.insert(name.to_string(), id);
        Ok(id)
    }
}
