//! Named parameter storage, graph binding and the Adam optimizer.
//!
//! Every trainable tensor lives in a [`ParamStore`] under a unique name and a
//! tag that identifies its role (`core`, `head:<domain>`, `msa`,
//! `mse:<domain>`, `mst:<pair>`).  Tags drive checkpoint export (inference
//! keeps only `core` and `head:*`) and freezing (dedicated transfer freezes
//! the teacher).  The store iterates in name order everywhere, so
//! initialization, optimizer sweeps and serialization are all deterministic.
//!
//! A training step binds parameters into an [`autodiff::Graph`] through a
//! [`Binder`]: trainable entries become gradient-tracked leaves, frozen ones
//! become constants.  After `backward`, [`Adam::step`] routes each leaf
//! gradient back to its named entry.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, VarId};
use crate::tensor::Tensor;

/// One named parameter with its optimizer state.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub tag: String,
    pub trainable: bool,
    /// Adam first/second moment estimates, same shape as `tensor`.
    m: Tensor,
    v: Tensor,
}

/// A deterministic, name-ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Register a parameter.  Names must be unique; a duplicate is a
    /// construction bug, not a runtime condition.
    pub fn insert(&mut self, name: &str, tag: &str, tensor: Tensor) {
        let shape = tensor.shape().to_vec();
        let prev = self.entries.insert(
            name.to_string(),
            ParamEntry {
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                tensor,
                tag: tag.to_string(),
                trainable: true,
            },
        );
        assert!(prev.is_none(), "duplicate parameter '{name}'");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .tensor
    }

    pub fn entry(&self, name: &str) -> &ParamEntry {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Set every entry's trainable flag from its name and tag.
    pub fn set_trainable(&mut self, pred: impl Fn(&str, &str) -> bool) {
        for (name, e) in self.entries.iter_mut() {
            e.trainable = pred(name, &e.tag);
        }
    }

    /// Drop entries not matching the predicate (used when exporting an
    /// inference-only checkpoint).
    pub fn retain(&mut self, pred: impl Fn(&str, &str) -> bool) {
        self.entries.retain(|name, e| pred(name, &e.tag));
    }

    /// Replace a parameter value in place; the shape must match.
    pub fn load_value(&mut self, name: &str, value: Tensor) {
        let e = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        assert_eq!(
            e.tensor.shape(),
            value.shape(),
            "shape mismatch loading '{name}'"
        );
        e.tensor = value;
    }
}

// ---- initialization ----

/// Uniform Xavier/Glorot initialization over the given fan counts.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    uniform(rng, shape, -bound, bound)
}

/// Uniform initialization in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

// ---- graph binding ----

/// Binds store entries into a graph for one training step, recording which
/// leaf belongs to which parameter so gradients can be routed back.
pub struct Binder<'a> {
    graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<(String, VarId)>,
    force_frozen: bool,
}

impl<'a> Binder<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Binder {
            graph,
            store,
            bound: Vec::new(),
            force_frozen: false,
        }
    }

    /// A binder that ignores trainable flags and binds everything as a
    /// constant; used for inference.
    pub fn new_frozen(graph: &'a mut Graph, store: &'a ParamStore) -> Self {
        Binder {
            graph,
            store,
            bound: Vec::new(),
            force_frozen: true,
        }
    }

    /// Bind one parameter: a leaf if trainable, a constant if frozen.
    pub fn bind(&mut self, name: &str) -> VarId {
        let e = self.store.entry(name);
        if e.trainable && !self.force_frozen {
            let id = self.graph.leaf(e.tensor.clone());
            self.bound.push((name.to_string(), id));
            id
        } else {
            self.graph.constant(e.tensor.clone())
        }
    }

    /// The `(name, leaf)` pairs bound so far, consumed for the optimizer.
    pub fn finish(self) -> Vec<(String, VarId)> {
        debug_assert!(
            {
                let mut names: Vec<_> = self.bound.iter().map(|(n, _)| n).collect();
                names.sort();
                names.windows(2).all(|w| w[0] != w[1])
            },
            "a parameter was bound twice in one graph"
        );
        self.bound
    }
}

// ---- optimizer ----

/// Adam with the standard bias correction.  Moments persist in the store;
/// only the step counter lives here.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam::default()
    }

    /// Apply one update from the gradients accumulated in `graph` to every
    /// bound parameter, with the given learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        graph: &Graph,
        bound: &[(String, VarId)],
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, id) in bound {
            let grad = graph.grad(*id);
            let e = store
                .entries
                .get_mut(name)
                .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
            assert_eq!(grad.shape(), e.tensor.shape(), "gradient shape for '{name}'");
            let (p, m, v) = (e.tensor.data_mut(), e.m.data_mut(), e.v.data_mut());
            for i in 0..p.len() {
                let g = grad.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mh = mi / bc1;
                let vh = vi / bc2;
                p[i] = (p[i] as f64 - lr * mh / (vh.sqrt() + self.eps)) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_insert_get_and_order() {
        let mut s = ParamStore::new();
        s.insert("b.w", "core", Tensor::zeros(&[2]));
        s.insert("a.w", "head:fine", Tensor::zeros(&[3]));
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a.w", "b.w"]);
        assert_eq!(s.numel(), 5);
        assert_eq!(s.entry("a.w").tag, "head:fine");
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_insert_panics() {
        let mut s = ParamStore::new();
        s.insert("w", "core", Tensor::zeros(&[1]));
        s.insert("w", "core", Tensor::zeros(&[1]));
    }

    #[test]
    fn xavier_respects_bounds_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = xavier_uniform(&mut rng, &[40, 30], 30, 40);
        let bound = (6.0f64 / 70.0).sqrt() as f32;
        assert!(t.data().iter().all(|&v| v.abs() <= bound));
        // Not degenerate, and reproducible.
        assert!(t.data().iter().any(|&v| v.abs() > bound / 10.0));
        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let t2 = xavier_uniform(&mut rng2, &[40, 30], 30, 40);
        assert_eq!(t, t2);
    }

    /// Two Adam steps against an independent scalar recomputation.
    #[test]
    fn adam_matches_hand_computation() {
        let mut s = ParamStore::new();
        s.insert("x", "core", Tensor::from_vec(&[2], vec![1.0, -2.0]));
        let mut opt = Adam::new();
        let lr = 0.01;

        let grads = [[0.3f64, -0.5], [-0.1, 0.2]];
        // Reference implementation, all in f64.
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let mut xref = [1.0f64, -2.0];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            for i in 0..2 {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powi(t));
                let vh = v[i] / (1.0 - b2.powi(t));
                xref[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }

        for g in &grads {
            let mut graph = Graph::new();
            let mut binder = Binder::new(&mut graph, &s);
            let x = binder.bind("x");
            let bound = binder.finish();
            // loss = g . x, so d(loss)/dx = g exactly.
            let gt = graph.constant(Tensor::from_vec(&[1, 2], g.map(|v| v as f32).to_vec()));
            let dot = graph.affine_map(gt, x, None);
            let loss = graph.linear_combination(&[(dot, 1.0)]);
            graph.backward(loss);
            opt.step(&mut s, &graph, &bound, lr);
        }
        for i in 0..2 {
            assert!(
                (s.get("x").data()[i] as f64 - xref[i]).abs() < 1e-6,
                "component {i}: {} vs {}",
                s.get("x").data()[i],
                xref[i]
            );
        }
    }

    /// Adam should drive a quadratic to its minimum.
    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        s.insert("x", "core", Tensor::from_vec(&[1], vec![-4.0]));
        let mut opt = Adam::new();
        for _ in 0..400 {
            let mut graph = Graph::new();
            let mut binder = Binder::new(&mut graph, &s);
            let x = binder.bind("x");
            let bound = binder.finish();
            // (x - 3)^2 written as (x + (-3)) * (x + (-3)).
            let c = graph.constant(Tensor::from_vec(&[1], vec![-3.0]));
            let d = graph.add(x, c);
            let sq = graph.mul(d, d);
            let loss = graph.linear_combination(&[(sq, 1.0)]);
            graph.backward(loss);
            opt.step(&mut s, &graph, &bound, 0.05);
        }
        let x = s.get("x").data()[0];
        assert!((x - 3.0).abs() < 1e-2, "converged to {x}");
    }

    #[test]
    fn frozen_entries_bind_as_constants_and_stay_fixed() {
        let mut s = ParamStore::new();
        s.insert("free", "head:fine", Tensor::from_vec(&[1], vec![1.0]));
        s.insert("frozen", "core", Tensor::from_vec(&[1], vec![2.0]));
        s.set_trainable(|_, tag| tag != "core");

        let mut opt = Adam::new();
        let mut graph = Graph::new();
        let mut binder = Binder::new(&mut graph, &s);
        let a = binder.bind("free");
        let b = binder.bind("frozen");
        let bound = binder.finish();
        assert_eq!(bound.len(), 1, "only the trainable entry is bound");
        let prod = graph.mul(a, b);
        let loss = graph.linear_combination(&[(prod, 1.0)]);
        graph.backward(loss);
        opt.step(&mut s, &graph, &bound, 0.1);

        assert_eq!(s.get("frozen").data()[0], 2.0);
        assert_ne!(s.get("free").data()[0], 1.0);
    }

    #[test]
    fn retain_filters_by_tag() {
        let mut s = ParamStore::new();
        s.insert("core.w", "core", Tensor::zeros(&[1]));
        s.insert("head.fine.w", "head:fine", Tensor::zeros(&[1]));
        s.insert("msa.ws", "msa", Tensor::zeros(&[1]));
        s.retain(|_, tag| tag == "core" || tag.starts_with("head:"));
        let names: Vec<_> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["core.w", "head.fine.w"]);
    }
}
