use rand::Rng;

use super::tape::{Activation, Gradients, Tape, Var};
use super::tensor::Tensor;
use super::AdError;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.rows, value.cols);
        Self {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// An ordered collection of parameters owned by one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T> {
    pub params: Vec<Parameter<T>>,
}

/// Tape handles for every parameter of a [`ParamSet`], in order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Puts every parameter on the tape; with `trainable == false` they are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.input(p.value.clone(), trainable))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds `scale * d(out)/d(param)` into each parameter's gradient.
    pub fn accumulate(&mut self, grads: &Gradients<T>, bound: &Bound, scale: T) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                for (a, &b) in p.grad.data.iter_mut().zip(&g.data) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn add_grads(&mut self, other: &[Tensor<T>], scale: T) {
        for (p, g) in self.params.iter_mut().zip(other) {
            for (a, &b) in p.grad.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn grads(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    /// Flattened copy of all values, in order.
    pub fn flat_values(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[T]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.params.iter().flat_map(|p| p.grad.data.iter().copied()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
        }
    }
}

/// Index pair of a fully connected layer inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Dense {
        Self::init_scaled(set, name, fan_in, fan_out, 1.0, rng)
    }

    pub fn init_scaled<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Dense {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        let w = set.push(format!("{name}.w"), Tensor::new(fan_out, fan_in, w));
        let b = set.push(format!("{name}.b"), Tensor::zeros(1, fan_out));
        Dense { w, b, fan_in, fan_out }
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, AdError> {
        tape.linear(x, bound.var(self.w), Some(bound.var(self.b)))
    }

    pub fn param_count(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

/// Stack of dense layers, each followed by `act` except the last when
/// `linear_out` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub act: Activation,
    pub linear_out: bool,
}

impl Mlp {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        set: &mut ParamSet<T>,
        name: &str,
        widths: &[usize],
        act: Activation,
        linear_out: bool,
        rng: &mut R,
    ) -> Mlp {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(set, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp {
            layers,
            act,
            linear_out,
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, mut x: Var) -> Result<Var, AdError> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(tape, bound, x)?;
            if !(self.linear_out && i + 1 == n) {
                x = tape.act(x, self.act);
            }
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }
}
