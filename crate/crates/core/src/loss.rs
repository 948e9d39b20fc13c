//! Training objectives: per-task cross-entropy, the MinCut regularizer on a
//! soft assignment, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weights of the typing, staging and MinCut terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub typing: f64,
    pub staging: f64,
    pub mincut: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            typing: 1.0,
            staging: 1.0,
            mincut: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("typing", self.typing),
            ("staging", self.staging),
            ("mincut", self.mincut),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!(
                    "{name} loss weight must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

pub fn cross_entropy(tape: &mut Tape<'_>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// The two MinCut terms, kept separate so they can be inspected.
#[derive(Clone, Copy, Debug)]
pub struct MinCutTerms {
    /// `-Tr(Sᵀ Ã S) / Tr(Sᵀ D̃ S)`, in `[-1, 0]`.
    pub cut: Var,
    /// `‖SᵀS / ‖SᵀS‖_F - I_p / √p‖_F`, in `[0, 2]`.
    pub ortho: Var,
    pub total: Var,
}

/// MinCut loss of assignment `s` (`|V|×p`) against the self-loop augmented
/// adjacency `adj` (`Ã`) and its degree matrix `deg` (`D̃`).
pub fn mincut_loss(tape: &mut Tape<'_>, s: Var, adj: Var, deg: Var) -> Result<MinCutTerms> {
    let [n, p] = tape.shape(s);
    if p == 0 {
        return Err(Error::contract("MinCut loss needs at least one cluster"));
    }
    for m in [adj, deg] {
        if tape.shape(m) != [n, n] {
            return Err(Error::Shape {
                op: "mincut_loss",
                lhs: [n, p],
                rhs: tape.shape(m),
            });
        }
    }
    let adj_s = tape.matmul(adj, s)?;
    let num = tape.matmul_tn(s, adj_s)?;
    let num = tape.trace(num)?;
    let deg_s = tape.matmul(deg, s)?;
    let den = tape.matmul_tn(s, deg_s)?;
    let den = tape.trace(den)?;
    let ratio = tape.div_scalar(num, den)?;
    let cut = tape.scale(ratio, -1.0)?;

    let sts = tape.matmul_tn(s, s)?;
    let sq = tape.mul(sts, sts)?;
    let sq = tape.sum(sq)?;
    let fro = tape.sqrt(sq)?;
    let normed = tape.div_scalar(sts, fro)?;
    let mut target = Tensor::eye(p);
    target.scale_assign(1.0 / (p as f64).sqrt());
    let target = tape.constant(target)?;
    let diff = tape.sub(normed, target)?;
    let dsq = tape.mul(diff, diff)?;
    let dsq = tape.sum(dsq)?;
    let ortho = tape.sqrt(dsq)?;

    let total = tape.add(cut, ortho)?;
    Ok(MinCutTerms { cut, ortho, total })
}

/// `w_t L_type + w_s L_stage + w_m L_mincut`. Absent terms contribute zero.
pub fn total_loss(
    tape: &mut Tape<'_>,
    typing: Option<Var>,
    staging: Option<Var>,
    mincut: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut acc: Option<Var> = None;
    for (term, w) in [
        (typing, weights.typing),
        (staging, weights.staging),
        (mincut, weights.mincut),
    ] {
        let Some(term) = term else { continue };
        let scaled = tape.scale(term, w)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, scaled)?,
            None => scaled,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}
