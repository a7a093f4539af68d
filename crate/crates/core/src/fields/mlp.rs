use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Softplus { beta: f64 },
    Relu,
}

impl Activation {
    fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Softplus { beta } => tape.softplus(x, beta),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Self {
        let weight = store.insert(format!("{name}.w"), Tensor::from_f64(in_dim, out_dim, &weight));
        let bias = store.insert(format!("{name}.b"), Tensor::from_f64(1, out_dim, &bias));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let h = tape.matmul(x, w);
        tape.add_row(h, b)
    }
}

/// Stack of linear layers with an activation between them (none after the
/// last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < last {
                h = self.activation.apply(tape, h);
            }
        }
        h
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

pub(crate) fn normal(rng: &mut impl Rng, mean: f64, std: f64, n: usize) -> Vec<f64> {
    if std == 0.0 {
        return vec![mean; n];
    }
    let d = Normal::new(mean, std).expect("valid normal");
    (0..n).map(|_| d.sample(rng)).collect()
}

/// He-style initialization scaled for the given fan-in.
pub(crate) fn he_init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Vec<f64> {
    normal(rng, 0.0, (2.0 / in_dim as f64).sqrt(), in_dim * out_dim)
}
