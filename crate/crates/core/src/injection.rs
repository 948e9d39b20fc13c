//! Task-aware knowledge injection.
//!
//! The shared node representation `H` attends (as queries) over a trainable
//! bank of latent tokens `T_j` (keys and values) owned by task `j`:
//!
//! ```text
//! Z_j = LN(H + MH(H, T_j, T_j))
//! Ĥ_j = LN(Z_j + rFF(Z_j))
//! ```
//!
//! Every step is row-wise in `H`, so output row `i` depends only on input
//! row `i` and the bank.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadWeights;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::params::{glorot_uniform, normal, ParamId, ParamStore};
use crate::tape::{Tape, Var};

pub const TOKEN_INIT_STD: f64 = 0.02;

/// Whether task branches own separate token banks or share one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenScheme {
    Shared,
    #[default]
    Specific,
}

/// What sits between the shared encoder and the pooling of a branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionKind {
    /// Cross-attention onto the task's latent tokens.
    #[default]
    Attention,
    /// A task-specific linear map in place of the cross-attention.
    Linear,
    /// No task-specific transfer; the branch sees the shared features.
    Identity,
}

#[derive(Clone, Debug)]
pub struct TokenBank {
    pub tokens: ParamId,
    pub count: usize,
}

impl TokenBank {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::config("token bank needs at least one token"));
        }
        Ok(TokenBank {
            tokens: store.insert(name, normal(count, dim, TOKEN_INIT_STD, rng))?,
            count,
        })
    }
}

#[derive(Clone, Debug)]
pub struct InjectionBlock {
    kind: InjectionKind,
    attention: Option<MultiHeadWeights>,
    linear: Option<ParamId>,
    norm1: Option<LayerNorm>,
    norm2: Option<LayerNorm>,
    ff: Option<FeedForward>,
    dim: usize,
}

impl InjectionBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: InjectionKind,
        dim: usize,
        heads: usize,
        scaled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut block = InjectionBlock {
            kind,
            attention: None,
            linear: None,
            norm1: None,
            norm2: None,
            ff: None,
            dim,
        };
        match kind {
            InjectionKind::Identity => return Ok(block),
            InjectionKind::Attention => {
                block.attention = Some(MultiHeadWeights::new(
                    store,
                    &format!("{prefix}.attn"),
                    dim,
                    heads,
                    scaled,
                    rng,
                )?)
            }
            InjectionKind::Linear => {
                block.linear =
                    Some(store.insert(format!("{prefix}.linear"), glorot_uniform(dim, dim, rng))?)
            }
        }
        block.norm1 = Some(LayerNorm::new(store, &format!("{prefix}.ln1"), dim)?);
        block.ff = Some(FeedForward::new(
            store,
            &format!("{prefix}.rff"),
            dim,
            2 * dim,
            rng,
        )?);
        block.norm2 = Some(LayerNorm::new(store, &format!("{prefix}.ln2"), dim)?);
        Ok(block)
    }

    pub fn kind(&self) -> InjectionKind {
        self.kind
    }

    pub fn attention(&self) -> Option<&MultiHeadWeights> {
        self.attention.as_ref()
    }

    /// Maps shared node features `h` (`|V|×d`) into the task space.
    /// `bank` is ignored unless the block uses cross-attention.
    pub fn inject(&self, tape: &mut Tape<'_>, bank: Option<&TokenBank>, h: Var) -> Result<Var> {
        let shape = tape.shape(h);
        if shape[1] != self.dim {
            return Err(Error::Shape {
                op: "injection input",
                lhs: shape,
                rhs: [shape[0], self.dim],
            });
        }
        let transfer = match self.kind {
            InjectionKind::Identity => return Ok(h),
            InjectionKind::Attention => {
                let bank =
                    bank.ok_or_else(|| Error::contract("attention injection needs a token bank"))?;
                let tokens = tape.param(bank.tokens)?;
                self.attention
                    .as_ref()
                    .expect("attention weights")
                    .attend(tape, h, tokens, tokens)?
            }
            InjectionKind::Linear => {
                let w = tape.param(self.linear.expect("linear weight"))?;
                tape.matmul(h, w)?
            }
        };
        let (norm1, norm2, ff) = (
            self.norm1.as_ref().expect("norm1"),
            self.norm2.as_ref().expect("norm2"),
            self.ff.as_ref().expect("rff"),
        );
        let res = tape.add(h, transfer)?;
        let z = norm1.forward(tape, res)?;
        let f = ff.forward(tape, z)?;
        let res = tape.add(z, f)?;
        norm2.forward(tape, res)
    }
}
