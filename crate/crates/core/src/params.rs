//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Every learnable tensor of a model, keyed by a dotted path such as
/// `backbone.layers.0.attn.q.w` or `adapters.lang.2.up.b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Copies every tensor whose name starts with `prefix` into a new store.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamStore { params }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    /// SHA-256 over the names, shapes and little-endian bytes of the given
    /// parameters, in sorted name order.
    pub fn fingerprint<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> String {
        let mut sorted: Vec<&str> = names.into_iter().collect();
        sorted.sort_unstable();
        let mut h = Sha256::new();
        for name in sorted {
            h.update(name.as_bytes());
            h.update([0u8]);
            if let Some(t) = self.params.get(name) {
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Lazily places parameters on a tape as leaves, once per name.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore,
    trainable: Trainable<'a>,
    vars: HashMap<String, Var>,
    _marker: std::marker::PhantomData<T>,
}

enum Trainable<'a> {
    None,
    All,
    Set(&'a BTreeSet<String>),
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Leaves for names in `trainable` track gradients; others are constants.
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<String>) -> Self {
        Self::with(store, Trainable::Set(trainable))
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::with(store, Trainable::None)
    }

    pub fn all(store: &'a ParamStore) -> Self {
        Self::with(store, Trainable::All)
    }

    fn with(store: &'a ParamStore, trainable: Trainable<'a>) -> Self {
        Self {
            store,
            trainable,
            vars: HashMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Makes `name` resolve to an existing tape variable.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    pub fn var(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let rg = match self.trainable {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Set(s) => s.contains(name),
        };
        let v = tape.leaf(t.cast(), rg);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, gradient-tracking parameter.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| tape.grad(v).map(|g| (k.clone(), g.cast())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_content_and_ignores_order() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[2]));
        s.insert("b", Tensor::full(&[3], 1.0));
        let f1 = s.fingerprint(["a", "b"]);
        assert_eq!(f1, s.fingerprint(["b", "a"]));
        s.get_mut("b").unwrap().data_mut()[1] = 1.0 + f32::EPSILON;
        assert_ne!(f1, s.fingerprint(["a", "b"]));
        assert_eq!(s.fingerprint(["a"]).len(), 64);
    }

    #[test]
    fn binder_reuses_leaves() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]));
        let set: BTreeSet<String> = ["w".to_string()].into();
        let mut tape = Tape::<f32>::new();
        let mut b = Binder::new(&s, &set);
        let v1 = b.var(&mut tape, "w").unwrap();
        let v2 = b.var(&mut tape, "w").unwrap();
        assert_eq!(v1, v2);
        assert!(tape.requires_grad(v1));
        assert!(b.var(&mut tape, "missing").is_err());
    }
}
