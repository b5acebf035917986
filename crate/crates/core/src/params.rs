//! Named parameter tensors and the per-step binding of parameters to a graph.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{grad_check, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Ordered collection of named tensors. A tensor's `requires_grad` flag is
/// its trainable flag; frozen tensors never get a gradient leaf.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor: tensor.with_requires_grad(trainable),
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.name.clone())
            .collect()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.iter()
            .filter(|(_, p)| p.trainable())
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, flag: bool) {
        self.params[id.0].tensor.set_requires_grad(flag);
    }

    /// Replaces the values of `id`, keeping its trainable flag.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let param = &mut self.params[id.0];
        if param.tensor.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter {}: shape {:?} cannot take {:?}",
                param.name,
                param.tensor.shape(),
                value.shape()
            )));
        }
        let flag = param.tensor.requires_grad();
        param.tensor = value.with_requires_grad(flag);
        Ok(())
    }

    /// SHA-256 over names, shapes and value bits of every parameter whose
    /// name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            for &d in p.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.tensor.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.l2_norm()))
            .collect()
    }
}

/// One forward/backward pass: a fresh graph plus lazily created leaves for
/// the parameters the forward touches.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    rng: ChaCha8Rng,
    dropout_on: bool,
}

impl<'a> Session<'a> {
    /// Evaluation session: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_graph(Graph::new(), store, 0, false)
    }

    /// Training session: dropout masks drawn from a generator seeded by `seed`.
    pub fn train(store: &'a ParamStore, seed: u64) -> Self {
        Self::with_graph(Graph::new(), store, seed, true)
    }

    pub fn with_graph(graph: Graph, store: &'a ParamStore, seed: u64, dropout_on: bool) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_on,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_on
    }

    /// Sets whether [`Session::dropout`] is active; returns the old setting.
    pub fn set_dropout(&mut self, on: bool) -> bool {
        std::mem::replace(&mut self.dropout_on, on)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Routes `id` to an existing graph value instead of the stored tensor.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Inverted dropout with rate `p`, realized as a sampled 0/1 mask.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.dropout_on || p <= 0.0 {
            return Ok(x);
        }
        let shape = self.graph.shape(x).to_vec();
        let mut mask = Tensor::zeros(shape);
        for m in mask.data_mut() {
            *m = if self.rng.random::<f64>() < p { 0.0 } else { 1.0 };
        }
        self.graph.apply_mask(x, &mask, 1.0 / (1.0 - p))
    }

    /// Gradients of the trainable parameters this session touched, in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.store.params[i].trainable() {
                    return None;
                }
                self.graph.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}

/// Finite-difference check of a model-level scalar with respect to the
/// parameters `ids`; all other parameters stay at their stored values.
pub fn grad_check_params<F>(store: &ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |g, vars| {
            let mut s = Session::with_graph(std::mem::take(g), store, 0, false);
            for (&id, &v) in ids.iter().zip(vars) {
                s.bind(id, v);
            }
            let out = f(&mut s)?;
            *g = s.into_graph();
            Ok(out)
        },
        &inputs,
        h,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over the trainable tensors of a store.
#[derive(Debug, Clone)]
pub struct Adam {
    settings: AdamSettings,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Adam {
    pub fn new(settings: AdamSettings) -> Self {
        Self {
            settings,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`. Gradients for frozen tensors are
    /// rejected rather than silently applied.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let AdamSettings {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.settings;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (id, g) in grads {
            let param = &mut store.params[id.0];
            if !param.trainable() {
                return Err(Error::Input(format!(
                    "optimizer received a gradient for frozen parameter {}",
                    param.name
                )));
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for (((w, g), m), v) in param.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_skips_frozen_and_moves_trainable() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(vec![2], 1.0), true);
        let f = store.add("f", Tensor::full(vec![2], 1.0), false);
        let before = store.checksum("f");
        let mut s = Session::eval(&store);
        let wv = s.param(w);
        let fv = s.param(f);
        let prod = s.graph.mul(wv, fv).unwrap();
        let loss = s.graph.sum(prod).unwrap();
        s.graph.backward(loss).unwrap();
        let grads = s.param_grads();
        assert_eq!(grads.len(), 1);
        let mut adam = Adam::new(AdamSettings::default());
        adam.step(&mut store, &grads).unwrap();
        assert_eq!(store.checksum("f"), before);
        assert!(store.get(w).data().iter().all(|&v| v < 1.0));
    }

    #[test]
    fn adam_rejects_frozen_gradient() {
        let mut store = ParamStore::new();
        let f = store.add("f", Tensor::full(vec![1], 1.0), false);
        let mut adam = Adam::new(AdamSettings::default());
        assert!(adam.step(&mut store, &[(f, vec![1.0])]).is_err());
    }

    #[test]
    fn dropout_off_in_eval() {
        let store = ParamStore::new();
        let mut s = Session::eval(&store);
        let x = s.graph.constant(Tensor::full(vec![3, 3], 2.0));
        let y = s.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::new();
        let a = store.add("a.x", Tensor::full(vec![2], 1.0), true);
        let c0 = store.checksum("a.");
        store.get_mut(a).data_mut()[0] = 1.5;
        assert_ne!(store.checksum("a."), c0);
    }
}
