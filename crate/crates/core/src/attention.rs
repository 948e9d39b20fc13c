//! Multi-head attention: `MH(Q, K, V) = [O_1, …, O_h] W^O` with
//! `O_i = softmax(Q W_i^Q (K W_i^K)ᵀ · s) V W_i^V`.
//!
//! Each head projects to `d / h` columns so the concatenation is `d` wide.
//! The logit scale `s` is `1/sqrt(d/h)` by default and `1` when unscaled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{glorot_uniform, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadWeights {
    query: Vec<ParamId>,
    key: Vec<ParamId>,
    value: Vec<ParamId>,
    output: ParamId,
    dim: usize,
    scaled: bool,
}

impl MultiHeadWeights {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        scaled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "head count {heads} must be positive and divide width {dim}"
            )));
        }
        let dh = dim / heads;
        let proj = |kind: &str, store: &mut ParamStore, rng: &mut _| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|i| store.insert(format!("{prefix}.{kind}{i}"), glorot_uniform(dim, dh, rng)))
                .collect()
        };
        let query = proj("q", store, rng)?;
        let key = proj("k", store, rng)?;
        let value = proj("v", store, rng)?;
        let output = store.insert(format!("{prefix}.o"), glorot_uniform(dim, dim, rng))?;
        Ok(MultiHeadWeights {
            query,
            key,
            value,
            output,
            dim,
            scaled,
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads()
    }

    pub fn logit_scale(&self) -> f64 {
        if self.scaled {
            1.0 / (self.head_dim() as f64).sqrt()
        } else {
            1.0
        }
    }

    pub fn query_ids(&self) -> &[ParamId] {
        &self.query
    }

    pub fn key_ids(&self) -> &[ParamId] {
        &self.key
    }

    pub fn value_ids(&self) -> &[ParamId] {
        &self.value
    }

    pub fn output_id(&self) -> ParamId {
        self.output
    }

    pub fn attend(&self, tape: &mut Tape<'_>, q: Var, k: Var, v: Var) -> Result<Var> {
        self.attend_with_weights(tape, q, k, v).map(|(out, _)| out)
    }

    /// Like [`attend`](Self::attend) but also returns each head's
    /// `n_q × n_k` attention matrix.
    pub fn attend_with_weights(
        &self,
        tape: &mut Tape<'_>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
        if ks[0] == 0 {
            return Err(Error::contract("attention over zero keys"));
        }
        if ks[0] != vs[0] {
            return Err(Error::Shape {
                op: "attention keys/values",
                lhs: ks,
                rhs: vs,
            });
        }
        for s in [qs, ks, vs] {
            if s[1] != self.dim {
                return Err(Error::Shape {
                    op: "attention width",
                    lhs: s,
                    rhs: [self.dim, self.dim],
                });
            }
        }
        let scale = self.logit_scale();
        let mut heads = Vec::with_capacity(self.heads());
        let mut weights = Vec::with_capacity(self.heads());
        for i in 0..self.heads() {
            let (wq, wk, wv) = (
                tape.param(self.query[i])?,
                tape.param(self.key[i])?,
                tape.param(self.value[i])?,
            );
            let qh = tape.matmul(q, wq)?;
            let kh = tape.matmul(k, wk)?;
            let vh = tape.matmul(v, wv)?;
            let mut logits = tape.matmul_nt(qh, kh)?;
            if scale != 1.0 {
                logits = tape.scale(logits, scale)?;
            }
            let attn = tape.softmax_rows(logits)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let cat = tape.concat_cols(&heads)?;
        let wo = tape.param(self.output)?;
        Ok((tape.matmul(cat, wo)?, weights))
    }
}
