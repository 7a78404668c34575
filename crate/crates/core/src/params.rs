//! Named parameter storage, graph binding and the AdamW optimizer.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
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

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.params
    }

    pub fn from_map(params: BTreeMap<String, Tensor>) -> Self {
        Self { params }
    }

    /// SHA-256 over the names, shapes and raw bytes of every parameter
    /// accepted by `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().filter(|(n, _)| filter(n)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }

    /// Place every parameter on the tape; `trainable` decides which leaves
    /// collect gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable(name))))
            .collect();
        Bindings { vars }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for the bound parameters that received one.
    pub fn collect(&self, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(t) = grads.take(*var) {
                out.insert(name.clone(), t);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter with a gradient; `lr_of` returns the
    /// learning rate of the parameter's group.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.params.get_mut(name);
            ensure!(p.is_some(), Contract, "gradient for unknown parameter `{name}`");
            let p = p.unwrap();
            ensure!(
                p.shape() == g.shape(),
                Contract,
                "gradient shape mismatch for `{name}`"
            );
            let lr = lr_of(name);
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *pv);
            }
        }
        Ok(())
    }

    /// Flatten to tensors for checkpointing (`m/<name>`, `v/<name>`, `step`).
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("adam.m/{name}"), m.clone());
            out.insert(format!("adam.v/{name}"), v.clone());
        }
        out.insert("adam.step".into(), Tensor::scalar(self.step as f64));
        out
    }

    pub fn from_state_tensors(weight_decay: f64, tensors: &BTreeMap<String, Tensor>) -> Self {
        let mut opt = Self::new(weight_decay);
        for (key, t) in tensors {
            if let Some(name) = key.strip_prefix("adam.m/") {
                let v = tensors
                    .get(&format!("adam.v/{name}"))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                opt.moments.insert(name.to_string(), (t.clone(), v));
            }
        }
        if let Some(s) = tensors.get("adam.step") {
            opt.step = s.item() as u64;
        }
        opt
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let b = ps.bind(&mut g, |_| true);
            let sq = g.square(b.get("x"));
            let loss = g.sum(sq);
            let mut grads = g.backward(loss);
            let grads = b.collect(&mut grads);
            opt.step(&mut ps, &grads, |_| 0.01).unwrap();
        }
        assert!(ps.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn hash_tracks_selected_parameters_only() {
        let mut ps = ParamStore::new();
        ps.insert("a", Tensor::zeros(&[2]));
        ps.insert("b", Tensor::zeros(&[2]));
        let before = ps.hash_where(|n| n == "a");
        ps.get_mut("b").unwrap().data_mut()[0] = 1.0;
        assert_eq!(before, ps.hash_where(|n| n == "a"));
        assert_ne!(ps.hash(), {
            let mut q = ps.clone();
            q.get_mut("a").unwrap().data_mut()[1] = 2.0;
            q.hash()
        });
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::full(&[3], 1.0));
        let mut opt = AdamW::default();
        let grads: BTreeMap<_, _> = [("w".to_string(), Tensor::full(&[3], 0.5))].into();
        opt.step(&mut ps, &grads, |_| 1e-3).unwrap();
        let restored = AdamW::from_state_tensors(opt.weight_decay, &opt.state_tensors());
        assert_eq!(restored, opt);
    }
}
