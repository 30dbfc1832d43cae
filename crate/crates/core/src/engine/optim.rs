use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::Tensor;

/// Stochastic gradient descent with classical momentum:
/// `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        for (&id, g) in grads {
            let v = self.velocity.entry(id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.momentum * *vi + gi;
            }
            let lr = self.lr;
            for (p, vi) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::params::ParamKind;

    #[test]
    fn momentum_accumulates_velocity() {
        let mut store = ParamStore::new();
        let id = store.insert("p".into(), ParamKind::Trainable, Tensor::full([1, 1, 1, 1], 1.0));
        let mut opt = Sgd::new(0.1, 0.9);
        let mut grads = Gradients::new();
        grads.insert(id, Tensor::full([1, 1, 1, 1], 1.0));
        opt.step(&mut store, &grads);
        opt.step(&mut store, &grads);
        // 1 − 0.1·1 − 0.1·1.9
        assert!((store.get(id).data()[0] - 0.71).abs() < 1e-6);
    }
}
