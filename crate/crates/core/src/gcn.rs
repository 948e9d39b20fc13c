//! Task-shared graph convolution stack: `H_{l+1} = ReLU(Â H_l W_l)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GcnStack {
    /// Linear map from the ingested feature width to the working width,
    /// present only when the two differ.
    input_proj: Option<ParamId>,
    layers: Vec<ParamId>,
    input_dim: usize,
    dim: usize,
}

impl GcnStack {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        dim: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::config("GCN depth must be at least 1"));
        }
        if dim == 0 || input_dim == 0 {
            return Err(Error::config("GCN widths must be positive"));
        }
        let input_proj = if input_dim != dim {
            Some(store.insert(
                format!("{prefix}.input_proj"),
                glorot_uniform(input_dim, dim, rng),
            )?)
        } else {
            None
        };
        let layers = (0..depth)
            .map(|l| store.insert(format!("{prefix}.w{l}"), glorot_uniform(dim, dim, rng)))
            .collect::<Result<_>>()?;
        Ok(GcnStack {
            input_proj,
            layers,
            input_dim,
            dim,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_ids(&self) -> &[ParamId] {
        &self.layers
    }

    /// Runs the stack. `features` is `|V|×input_dim`, `norm_adj` is `Â`.
    pub fn forward(&self, tape: &mut Tape<'_>, norm_adj: Var, features: Var) -> Result<Var> {
        let [_, width] = tape.shape(features);
        if width != self.input_dim {
            return Err(Error::Shape {
                op: "gcn input",
                lhs: tape.shape(features),
                rhs: [self.input_dim, self.dim],
            });
        }
        let mut h = match self.input_proj {
            Some(p) => {
                let w = tape.param(p)?;
                tape.matmul(features, w)?
            }
            None => features,
        };
        for &layer in &self.layers {
            let w = tape.param(layer)?;
            let hw = tape.matmul(h, w)?;
            let agg = tape.matmul(norm_adj, hw)?;
            h = tape.relu(agg)?;
        }
        Ok(h)
    }
}
