use rand::Rng;

use crate::engine::{Builder, Graph, ParamId, ParamKind, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-in) initialized convolution with "same" padding.
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let std = (2.0 / (cin * k * k) as f32).sqrt();
        let weight = b.normal("weight", [cout, cin, k, k], std);
        let bias = bias.then(|| b.constant("bias", [1, cout, 1, 1], 0.0, ParamKind::Trainable));
        Conv2d { weight, bias, stride, pad: k / 2 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, c: usize) -> Self {
        let shape = [1, c, 1, 1];
        BatchNorm2d {
            gamma: b.constant("weight", shape, 1.0, ParamKind::Trainable),
            beta: b.constant("bias", shape, 0.0, ParamKind::Trainable),
            running_mean: b.constant("running_mean", shape, 0.0, ParamKind::Buffer),
            running_var: b.constant("running_var", shape, 1.0, ParamKind::Buffer),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Bias-free convolution followed by batch normalization and, optionally, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> Self {
        ConvBn {
            conv: Conv2d::new(&mut b.sub("conv"), cin, cout, k, stride, false),
            bn: BatchNorm2d::new(&mut b.sub("bn"), cout),
            relu,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = self.conv.forward(g, x);
        let y = self.bn.forward(g, y);
        if self.relu {
            g.relu(y)
        } else {
            y
        }
    }

    /// Trainable scalars: `cin·cout·k²` weights plus `2·cout` affine terms.
    pub fn param_count(cin: usize, cout: usize, k: usize) -> usize {
        cin * cout * k * k + 2 * cout
    }
}
