use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; saved in checkpoints but never receives gradients.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat registry of every tensor a model owns, keyed by its module path
/// (for example `seg.encoder.stem.conv.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, kind: ParamKind, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, e)| e.kind == ParamKind::Trainable).map(|(id, _)| id)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Trainable scalar count of every parameter whose name starts with `prefix`.
    pub fn num_trainable_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable && under(&e.name, prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

fn under(name: &str, prefix: &str) -> bool {
    prefix.is_empty()
        || name == prefix
        || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn constant(&mut self, leaf: &str, shape: [usize; 4], value: f32, kind: ParamKind) -> ParamId {
        let name = self.name(leaf);
        self.store.insert(name, kind, Tensor::full(shape, value))
    }

    /// Zero-mean normal initialization with the given standard deviation.
    pub fn normal(&mut self, leaf: &str, shape: [usize; 4], std: f32) -> ParamId {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(self.rng)).collect();
        let name = self.name(leaf);
        self.store.insert(name, ParamKind::Trainable, Tensor::from_vec(shape, data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prefix_counting_respects_path_boundaries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        {
            let mut b = Builder::new(&mut store, &mut rng);
            b.sub("dec").normal("w", [2, 3, 1, 1], 1.0);
            b.sub("decoder").normal("w", [5, 1, 1, 1], 1.0);
            b.sub("dec").constant("rm", [1, 2, 1, 1], 0.0, ParamKind::Buffer);
        }
        assert_eq!(store.num_trainable(), 11);
        assert_eq!(store.num_trainable_under("dec"), 6);
        assert_eq!(store.num_trainable_under("decoder"), 5);
        assert_eq!(store.lookup("dec.w"), Some(ParamId(0)));
    }
}
