//! Named trainable parameters and the Adam update.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Mat;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Mat::len).sum()
    }

    /// Registers every parameter as a trainable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), graph.param(v.clone()))).collect();
        Bound { vars }
    }

    /// Registers every parameter as a constant leaf (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        let vars = self.params.iter().map(|(k, v)| (k.clone(), graph.constant(v.clone()))).collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.params {
            h.update(name.as_bytes());
            h.update((m.rows as u64).to_le_bytes());
            h.update((m.cols as u64).to_le_bytes());
            for x in &m.data {
                h.update(x.to_le_bytes());
            }
        }
        hex_digest(&h.finalize())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Parameter leaves of one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not registered"),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients keyed by parameter name; parameters the loss does not reach
    /// get zeros.
    pub fn collect_grads(&self, graph: &Graph, grads: &Gradients) -> BTreeMap<String, Mat> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = grads.get(*v).cloned().unwrap_or_else(|| {
                    let m = graph.value(*v);
                    Mat::zeros(m.rows, m.cols)
                });
                (name.clone(), g)
            })
            .collect()
    }
}

/// Adam with a fixed step size.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Mat>,
    second: BTreeMap<String, Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            let v = self.second.entry(name.clone()).or_insert_with(|| Mat::zeros(g.rows, g.cols));
            for i in 0..g.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let x = b.var("x");
            let sq = g.mul(x, x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &b.collect_grads(&g, &grads));
        }
        assert!(store.get("x").unwrap().data.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn checksum_tracks_values() {
        let mut a = ParamStore::new();
        a.insert("w", Mat::zeros(2, 2));
        let before = a.checksum();
        assert_eq!(before, a.clone().checksum());
        a.get_mut("w").unwrap().data[3] = 1e-12;
        assert_ne!(before, a.checksum());
    }
}
