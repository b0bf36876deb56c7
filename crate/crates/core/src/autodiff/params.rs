use std::collections::BTreeMap;

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named model state: trainable parameters plus non-trainable buffers
/// (batchnorm running statistics). Insertion order is the canonical order
/// used by the optimizer and the checkpoint writer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    /// Trainable parameter drawn from `uniform(-bound, bound)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn num_scalars(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// `(name, tensor)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Replaces every value from `named`, which must contain exactly the
    /// store's names with matching shapes.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let mut incoming: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, t) in named {
            incoming.insert(name, t);
        }
        let expected: Vec<&String> = self.by_name.keys().collect();
        let found: Vec<&String> = incoming.keys().collect();
        if expected != found {
            let missing: Vec<_> = expected.iter().filter(|n| !incoming.contains_key(**n)).collect();
            let unknown: Vec<_> = found.iter().filter(|n| !self.by_name.contains_key(**n)).collect();
            return Err(Error::Compat(format!(
                "checkpoint names do not match the model: missing {missing:?}, unexpected {unknown:?}"
            )));
        }
        for e in &mut self.entries {
            let t = incoming.remove(&e.name).expect("name sets checked above");
            if t.shape() != e.value.shape() {
                return Err(Error::Compat(format!(
                    "`{}` has shape {:?} in checkpoint, model expects {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t;
        }
        Ok(())
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    /// `trainable = false` binds everything as constants (evaluation).
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    /// Binds the trainable parameters, in store order, to existing tape
    /// variables. Used by finite-difference checks, which own the leaves.
    pub fn preset(store: &'s ParamStore, trainable_vars: &[Var]) -> Self {
        let mut b = Binder::new(store, true);
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        assert_eq!(ids.len(), trainable_vars.len(), "one variable per trainable parameter");
        for (id, &v) in ids.iter().zip(trainable_vars) {
            b.vars[id.0] = Some(v);
        }
        b
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let rg = self.trainable && self.store.is_trainable(id);
        let v = tape.leaf(self.store.get(id).clone(), rg);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients for every parameter (zeros for unused or frozen ones).
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect()
    }
}
