//! Affine layers and point-wise MLPs.
//!
//! Weight containers are generic over the slot type: `Linear<Tensor>` owns
//! parameters, `Linear<Var>` is the same layer bound onto a [`Tape`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Anything that owns named parameter slots in a fixed order.
pub trait Params<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));
}

/// Add gradients from `grads` for the bound copy `bound` into `owned`.
pub fn collect_grads<P, B>(owned: &mut P, bound: &B, grads: &super::Grads) -> Result<()>
where
    P: Params<Tensor>,
    B: Params<Var>,
{
    let mut vars = Vec::new();
    bound.visit("", &mut |_, v| vars.push(*v));
    let mut it = vars.into_iter();
    let mut err = None;
    owned.visit_mut(&mut |t| {
        let Some(v) = it.next() else { return };
        if let Some(g) = grads.get(v) {
            if let Err(e) = t.accumulate_grad(g) {
                err.get_or_insert(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn param_count<P: Params<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// `y = x · w + b`, with `w: in×out` and `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub w: T,
    pub b: T,
}

impl Linear<Tensor> {
    /// He-normal weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / inputs.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = (0..inputs * outputs).map(|_| normal.sample(rng)).collect();
        Linear {
            w: Tensor::from_parts(vec![inputs, outputs], w).with_requires_grad(true),
            b: Tensor::zeros(vec![1, outputs]).with_requires_grad(true),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![inputs, outputs]).with_requires_grad(true),
            b: Tensor::zeros(vec![1, outputs]).with_requires_grad(true),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }

    pub fn bind(&self, tape: &mut Tape) -> Linear<Var> {
        Linear {
            w: tape.leaf(&self.w),
            b: tape.leaf(&self.b),
        }
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.w.set_requires_grad(on);
        self.b.set_requires_grad(on);
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }
}

impl<T> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}w"), &self.w);
        f(format!("{prefix}b"), &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Stack of affine layers, each followed by its activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T = Tensor> {
    pub layers: Vec<Linear<T>>,
    pub activations: Vec<Activation>,
}

impl Mlp<Tensor> {
    /// Hidden layers use ReLU; the last layer uses `last`.
    pub fn init(widths: &[usize], last: Activation, rng: &mut impl Rng) -> Self {
        let layers: Vec<_> = widths.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        let mut activations = vec![Activation::Relu; layers.len()];
        if let Some(a) = activations.last_mut() {
            *a = last;
        }
        Mlp { layers, activations }
    }

    pub fn bind(&self, tape: &mut Tape) -> Mlp<Var> {
        Mlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            activations: self.activations.clone(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, Linear::inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.layers.iter_mut().for_each(|l| l.set_trainable(on));
    }

    /// Check that widths chain and that `input` columns match.
    pub fn check_dims(&self, input: usize) -> Result<()> {
        let mut width = input;
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs() != width || l.b.len() != l.outputs() {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} expects {} inputs, got {width}", l.inputs()),
                ));
            }
            width = l.outputs();
        }
        if self.activations.len() != self.layers.len() {
            return Err(Error::shape("mlp", "one activation per layer required"));
        }
        Ok(())
    }
}

impl Mlp<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            h = layer.forward(tape, h)?;
            if *act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}

impl<T> Params<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

/// Run `x` through `mlp`, validating all dimensions before computing.
pub fn mlp_forward(x: &Tensor, mlp: &Mlp) -> Result<Tensor> {
    mlp.check_dims(x.cols())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let bound = mlp.bind(&mut tape);
    let y = bound.forward(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_relu_is_zero() {
        let mlp = Mlp {
            layers: vec![Linear::zeros(3, 4)],
            activations: vec![Activation::Relu],
        };
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        let y = mlp_forward(&x, &mlp).unwrap();
        assert!(y.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_weights_pass_through() {
        let mut l = Linear::zeros(3, 3);
        for i in 0..3 {
            l.w.values_mut()[i * 3 + i] = 1.0;
        }
        let mlp = Mlp {
            layers: vec![l],
            activations: vec![Activation::Identity],
        };
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.5]).unwrap();
        assert_eq!(mlp_forward(&x, &mlp).unwrap().values(), x.values());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::init(&[4, 8, 2], Activation::Identity, &mut rng);
        let x = Tensor::zeros(vec![5, 3]);
        assert!(matches!(mlp_forward(&x, &mlp), Err(Error::Shape { .. })));
        let mut broken = mlp.clone();
        broken.layers[1] = Linear::zeros(7, 2);
        assert!(broken.check_dims(4).is_err());
    }

    #[test]
    fn visit_order_matches_bind() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[2, 3, 1], Activation::Identity, &mut rng);
        let mut names = Vec::new();
        mlp.visit("cls.", &mut |n, _| names.push(n));
        assert_eq!(names, ["cls.0.w", "cls.0.b", "cls.1.w", "cls.1.b"]);
    }
}
