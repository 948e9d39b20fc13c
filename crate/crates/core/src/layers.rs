//! Small building blocks shared by the injection block and the transformer.

use rand::Rng;

use crate::error::Result;
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Linear {
            weight: store.insert(format!("{prefix}.w"), glorot_uniform(d_in, d_out, rng))?,
            bias: store.insert(format!("{prefix}.b"), Tensor::zeros(1, d_out))?,
        })
    }

    pub fn zeros(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: store.insert(format!("{prefix}.w"), Tensor::zeros(d_in, d_out))?,
            bias: store.insert(format!("{prefix}.b"), Tensor::zeros(1, d_out))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight)?;
        let b = tape.param(self.bias)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::full(1, dim, 1.0))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma)?;
        let b = tape.param(self.beta)?;
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Row-wise feed-forward: `ReLU(x W_1 + b_1) W_2 + b_2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::new(store, &format!("{prefix}.fc1"), dim, hidden, rng)?,
            out: Linear::new(store, &format!("{prefix}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }
}
