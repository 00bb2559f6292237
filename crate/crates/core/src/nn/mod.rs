//! A small CPU neural-network toolkit: enough layers for ResNet-18, a tiny
//! test CNN and the fusion perceptron, with manual backpropagation.
//!
//! Tensors are dynamic-rank `f32` arrays in NCHW (images) or NF (vectors)
//! layout. Every layer has a pure evaluation `forward` and a training pair
//! `forward_train`/`backward`; `backward` accumulates parameter gradients
//! and returns the gradient with respect to the layer input.

mod layers;
mod models;
mod state;

pub use layers::{AdaptiveAvgPool2d, AvgPool2d, BasicBlock, BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2d, Relu};
pub use models::{mlp, resnet18, tiny_cnn, RESNET18_FEATURES, TINY_CNN_FEATURES};
pub use state::{load_state, read_safetensors, state_dict, write_safetensors};

use ndarray::{ArrayD, IxDyn, Zip};
use rand::Rng;

pub type Tensor = ArrayD<f32>;

/// A learnable tensor or a persistent buffer (e.g. batch-norm statistics).
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    /// Frozen parameters keep their gradient but are skipped by the optimizer.
    pub trainable: bool,
    pub buffer: bool,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
            buffer: false,
        }
    }

    pub fn buffer(value: Tensor) -> Self {
        Param {
            grad: Tensor::zeros(IxDyn(&[0])),
            value,
            trainable: false,
            buffer: true,
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let value = Tensor::from_shape_simple_fn(IxDyn(shape), || rng.random_range(-bound..=bound));
        Param::new(value)
    }
}

pub trait Layer: Send + Sync {
    fn forward(&self, x: &Tensor) -> Tensor;
    fn forward_train(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn visit(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {}
    fn visit_ref(&self, _prefix: &str, _f: &mut dyn FnMut(String, &Param)) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named layers applied in order.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    /// Children named by position, torch `nn.Sequential` style.
    pub fn indexed(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential {
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(i, l)| (i.to_string(), l))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (_, l) in &self.layers {
            h = l.forward(&h);
        }
        h
    }

    fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward_train(&h);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = grad.clone();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, l) in &mut self.layers {
            l.visit(&join(prefix, name), f);
        }
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (name, l) in &self.layers {
            l.visit_ref(&join(prefix, name), f);
        }
    }
}

pub fn parameter_count(model: &dyn Layer) -> usize {
    let mut n = 0;
    model.visit_ref("", &mut |_, p| {
        if !p.buffer {
            n += p.value.len();
        }
    });
    n
}

pub fn zero_grad(model: &mut dyn Layer) {
    model.visit("", &mut |_, p| p.grad.fill(0.0));
}

/// Marks every parameter whose name starts with `prefix` as frozen.
pub fn freeze(model: &mut dyn Layer, prefix: &str) {
    model.visit("", &mut |name, p| {
        if name.starts_with(prefix) && !p.buffer {
            p.trainable = false;
        }
    });
}

/// Mean squared error over all elements and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> (f32, Tensor) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.len().max(1) as f32;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f32>() / n;
    (loss, diff.mapv(|d| 2.0 * d / n))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Layer) {
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit("", &mut |_, p| {
            if p.buffer {
                return;
            }
            if m.len() <= idx {
                m.push(Tensor::zeros(p.value.raw_dim()));
                v.push(Tensor::zeros(p.value.raw_dim()));
            }
            if p.trainable {
                Zip::from(&mut p.value)
                    .and(&p.grad)
                    .and(&mut m[idx])
                    .and(&mut v[idx])
                    .for_each(|w, &g, m, v| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Compares analytic gradients of `sum(w * layer(x))` with central
    /// differences, for the input and for every trainable parameter.
    pub fn check(layer: &mut dyn Layer, input_shape: &[usize], tol: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // evenly spaced distinct values keep max-pool ties out of the stencil
        let n: usize = input_shape.iter().product();
        let mut values: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
        values.shuffle(&mut rng);
        let x = Tensor::from_shape_vec(IxDyn(input_shape), values).unwrap();
        let out = layer.forward_train(&x);
        let w = Tensor::from_shape_simple_fn(out.raw_dim(), || rng.random_range(-1.0..1.0f32));
        let objective = |layer: &mut dyn Layer, x: &Tensor| -> f64 {
            let y = layer.forward_train(x);
            y.iter().zip(w.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };

        zero_grad(layer);
        layer.forward_train(&x);
        let dx = layer.backward(&w);
        let h = 1e-3f32;

        let close = |analytic: f32, numeric: f64, what: &str| {
            let err = (analytic as f64 - numeric).abs();
            let scale = 1.0f64.max(numeric.abs()).max(analytic.abs() as f64);
            assert!(
                err / scale < tol as f64,
                "{what}: analytic {analytic} vs numeric {numeric}"
            );
        };

        for i in (0..x.len()).step_by((x.len() / 40).max(1)) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let numeric = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * h as f64);
            close(dx.as_slice().unwrap()[i], numeric, &format!("input[{i}]"));
        }

        let mut grads = Vec::new();
        layer.visit("", &mut |name, p| {
            if !p.buffer {
                grads.push((name, p.grad.clone()));
            }
        });
        for (name, grad) in grads {
            for i in (0..grad.len()).step_by((grad.len() / 20).max(1)) {
                let nudge = |delta: f32, layer: &mut dyn Layer| {
                    layer.visit("", &mut |n, p| {
                        if n == name {
                            p.value.as_slice_mut().unwrap()[i] += delta;
                        }
                    });
                };
                nudge(h, layer);
                let plus = objective(layer, &x);
                nudge(-2.0 * h, layer);
                let minus = objective(layer, &x);
                nudge(h, layer);
                let numeric = (plus - minus) / (2.0 * h as f64);
                close(grad.as_slice().unwrap()[i], numeric, &format!("{name}[{i}]"));
            }
        }
    }
}
