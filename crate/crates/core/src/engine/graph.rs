use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::params::{ParamId, ParamKind, ParamStore};
use super::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics are updated.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

enum Op {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, batch_stats: bool },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    AvgPool(Var, usize),
    MaxPool(Var, Vec<u32>),
    Resize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of trainable parameters produced by [`Graph::backward`].
pub type Gradients = BTreeMap<ParamId, Tensor>;

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every operation evaluates eagerly and records its inputs; `backward`
/// walks the tape in reverse. Parameters are read from (and normalization
/// running statistics written to) the borrowed [`ParamStore`].
pub struct Graph<'s> {
    store: &'s mut ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl<'s> Graph<'s> {
    pub fn new(store: &'s mut ParamStore, mode: Mode) -> Self {
        Graph { store, mode, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = self.store.entry(id);
        let needs = entry.kind == ParamKind::Trainable;
        let value = entry.value.clone();
        let v = self.push(value, Op::Param(id), needs);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let y = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(y, Op::Conv { x, w, b, stride, pad }, needs)
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Var {
        let gv = self.param(gamma);
        let bv = self.param(beta);
        let (mean, inv_std, batch_stats) = match self.mode {
            Mode::Train => {
                let (mean, var) = kernels::channel_moments(self.value(x));
                let count = (self.value(x).n() * self.value(x).plane()) as f32;
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let rm = self.store.get_mut(running_mean).data_mut();
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = self.store.get_mut(running_var).data_mut();
                for (r, v) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbiased;
                }
                let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<f32>>();
                (mean, inv_std, true)
            }
            Mode::Eval => {
                let mean = self.store.get(running_mean).data().to_vec();
                let inv_std =
                    self.store.get(running_var).data().iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect::<Vec<f32>>();
                (mean, inv_std, false)
            }
        };
        let y = kernels::channel_affine(self.value(x), &mean, &inv_std, self.value(gv).data(), self.value(bv).data());
        let needs = self.needs(x) || self.needs(gv) || self.needs(bv);
        self.push(y, Op::BatchNorm { x, gamma: gv, beta: bv, mean, inv_std, batch_stats }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(y, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let y = Tensor::from_vec(ta.shape(), data);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Mul(a, b), needs)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels(&tensors);
        let needs = parts.iter().any(|&v| self.needs(v));
        self.push(y, Op::Concat(parts.to_vec()), needs)
    }

    /// Channels `start .. start + len` of `x`.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let [n, c, h, w] = t.shape();
        assert!(start + len <= c, "channel range out of bounds");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for ni in 0..n {
            data.extend_from_slice(&t.sample(ni)[start * plane..(start + len) * plane]);
        }
        let y = Tensor::from_vec([n, len, h, w], data);
        let needs = self.needs(x);
        self.push(y, Op::Narrow(x, start), needs)
    }

    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let y = kernels::avg_pool(self.value(x), k);
        let needs = self.needs(x);
        self.push(y, Op::AvgPool(x, k), needs)
    }

    pub fn max_pool_3s2(&mut self, x: Var) -> Var {
        let (y, arg) = kernels::max_pool_3s2(self.value(x));
        let needs = self.needs(x);
        self.push(y, Op::MaxPool(x, arg), needs)
    }

    /// Bilinear resampling to `h × w` (half-pixel centers).
    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Var {
        let y = kernels::resize_bilinear(self.value(x), h, w);
        let needs = self.needs(x);
        self.push(y, Op::Resize(x), needs)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let [_, _, h, w] = self.shape(x);
        self.resize(x, 2 * h, 2 * w)
    }

    /// Reverse pass seeded with `dL/dv` for each `(v, grad)` pair. Returns the
    /// accumulated gradient of every trainable parameter reached.
    pub fn backward(&self, seeds: Vec<(Var, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(v), "seed gradient shape mismatch");
            accumulate(&mut grads, v, g);
        }
        let mut out = Gradients::new();
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.insert(*id, gy);
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let need_db = b.is_some_and(|b| self.needs(b));
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &gy,
                        *stride,
                        *pad,
                        self.needs(*x),
                        need_db,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let (Some(b), Some(db)) = (b, db) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                    let (dx, dgamma, dbeta) = kernels::batch_norm_backward(
                        self.value(*x),
                        &gy,
                        mean,
                        inv_std,
                        self.value(*gamma).data(),
                        *batch_stats,
                        self.needs(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    let c = dgamma.len();
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, Tensor::from_vec([1, c, 1, 1], dgamma));
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, Tensor::from_vec([1, c, 1, 1], dbeta));
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let data = gy.data().iter().zip(y.data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::from_vec(gy.shape(), data));
                }
                Op::Add(a, b) => {
                    if self.needs(*a) && self.needs(*b) {
                        accumulate(&mut grads, *a, gy.clone());
                        accumulate(&mut grads, *b, gy);
                    } else if self.needs(*a) {
                        accumulate(&mut grads, *a, gy);
                    } else {
                        accumulate(&mut grads, *b, gy);
                    }
                }
                Op::Mul(a, b) => {
                    for (this, other) in [(*a, *b), (*b, *a)] {
                        if self.needs(this) {
                            let o = self.value(other);
                            let data = gy.data().iter().zip(o.data()).map(|(g, v)| g * v).collect();
                            accumulate(&mut grads, this, Tensor::from_vec(gy.shape(), data));
                        }
                    }
                }
                Op::Concat(parts) => {
                    let [n, _, h, w] = gy.shape();
                    let plane = h * w;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).c();
                        if self.needs(p) {
                            let mut data = Vec::with_capacity(n * c * plane);
                            for ni in 0..n {
                                let s = gy.sample(ni);
                                data.extend_from_slice(&s[offset * plane..(offset + c) * plane]);
                            }
                            accumulate(&mut grads, p, Tensor::from_vec([n, c, h, w], data));
                        }
                        offset += c;
                    }
                }
                Op::Narrow(x, start) => {
                    let mut gx = Tensor::zeros(self.shape(*x));
                    let plane = gy.plane();
                    let len = gy.c();
                    for ni in 0..gy.n() {
                        gx.sample_mut(ni)[start * plane..(start + len) * plane].copy_from_slice(gy.sample(ni));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::AvgPool(x, k) => {
                    accumulate(&mut grads, *x, kernels::avg_pool_backward(&gy, *k));
                }
                Op::MaxPool(x, arg) => {
                    let [_, _, h, w] = self.shape(*x);
                    accumulate(&mut grads, *x, kernels::max_pool_3s2_backward(&gy, arg, h, w));
                }
                Op::Resize(x) => {
                    let [_, _, h, w] = self.shape(*x);
                    accumulate(&mut grads, *x, kernels::resize_bilinear_backward(&gy, h, w));
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
