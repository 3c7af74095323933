//! Layer building blocks over a [`Session`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::checkpoint::{ParamId, ParamStore, Session};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply<T: Scalar>(self, s: &Session<T>, x: Var) -> Var {
        match self {
            Activation::Relu => s.tape.relu(x),
            Activation::Tanh => s.tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Xavier/Glorot-uniform matrix of shape `[fan_in, fan_out]`.
pub fn xavier_uniform<T: Scalar, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::lit(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).unwrap()
}

/// Affine map `x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<Var> {
        let y = s.tape.matmul(x, s.p(self.w))?;
        s.tape.add(y, s.p(self.b))
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, x: Var) -> Result<Var> {
        let y = s.tape.layer_norm(x, T::lit(Self::EPS));
        let y = s.tape.mul(y, s.p(self.gain))?;
        s.tape.add(y, s.p(self.bias))
    }
}

/// Stack of linear layers with a shared hidden activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; `dims.len() - 1` linear layers.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, hidden, output }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<T>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(s, x)?;
            x = if i == last { self.output } else { self.hidden }.apply(s, x);
        }
        Ok(x)
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().unwrap()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_dim(&self) -> usize {
        self.last().fan_out
    }
}
