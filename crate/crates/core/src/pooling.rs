//! Graph pooling operators.
//!
//! The typing branch keeps a uniformly random subset of node rows; the
//! staging branch soft-clusters nodes with an assignment computed by a graph
//! convolution (`S = softmax(ReLU(Â Ĥ W_pool))`, pooled `Sᵀ Ĥ`). The other
//! kinds are the plain drop-based and cluster-based alternatives used for
//! ablations, all behind [`Pool::forward`].

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadWeights;
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, normal, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Uniform random node drop.
    Drop,
    /// Soft clustering with a graph-convolved assignment.
    GcMinCut,
    /// Keep the rows with the largest last channel.
    Sort,
    /// Keep the top-k rows under a learned linear score, gated by `tanh`.
    TopK,
    /// Like `TopK` but the score is a graph convolution.
    Sag,
    /// Soft clustering with `softmax(Â X W)`.
    Diff,
    /// Soft clustering with `softmax(X W)`.
    MinCut,
    /// Attention of learned seed vectors onto graph-convolved nodes.
    Gm,
}

impl PoolKind {
    pub const ALL: [PoolKind; 8] = [
        PoolKind::Drop,
        PoolKind::GcMinCut,
        PoolKind::Sort,
        PoolKind::TopK,
        PoolKind::Sag,
        PoolKind::Diff,
        PoolKind::MinCut,
        PoolKind::Gm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolKind::Drop => "drop",
            PoolKind::GcMinCut => "gcmincut",
            PoolKind::Sort => "sort",
            PoolKind::TopK => "topk",
            PoolKind::Sag => "sag",
            PoolKind::Diff => "diff",
            PoolKind::MinCut => "mincut",
            PoolKind::Gm => "gm",
        }
    }

    /// Drop-based kinds select rows; the rest pool into a fixed cluster count.
    pub fn is_drop_based(self) -> bool {
        matches!(
            self,
            PoolKind::Drop | PoolKind::Sort | PoolKind::TopK | PoolKind::Sag
        )
    }
}

impl fmt::Display for PoolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown pooling kind {s:?}")))
    }
}

/// Where the random node drop gets its subset from.
pub enum NodeSampler<'a> {
    Random(&'a mut dyn RngCore),
    /// A predetermined kept set (sorted ascending); used to replay a draw.
    Fixed(&'a [usize]),
}

/// A uniformly random `keep`-subset of `0..n`, ascending. Keeps everything
/// when `keep >= n`.
pub fn drop_select<R: Rng + ?Sized>(n: usize, keep: usize, rng: &mut R) -> Vec<usize> {
    if keep >= n {
        return (0..n).collect();
    }
    let mut idx = index::sample(rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// Indices of the `keep` largest scores, largest first; ties go to the
/// lower index.
pub fn top_k_indices(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(keep.min(scores.len()));
    idx
}

#[derive(Clone, Debug)]
pub enum Pool {
    Drop {
        keep: usize,
    },
    GcMinCut {
        weight: ParamId,
        clusters: usize,
        /// Use `ReLU(Â Ĥ W)` directly as the assignment, with all-zero rows
        /// replaced by the uniform row, instead of the row softmax.
        relu_only: bool,
    },
    Sort {
        keep: usize,
    },
    TopK {
        scorer: ParamId,
        keep: usize,
    },
    Sag {
        scorer: ParamId,
        keep: usize,
    },
    Diff {
        weight: ParamId,
        clusters: usize,
    },
    MinCut {
        weight: ParamId,
        clusters: usize,
    },
    Gm {
        seeds: ParamId,
        attention: MultiHeadWeights,
    },
}

pub struct PoolOutput {
    pub pooled: Var,
    /// Soft assignment `S` (`|V|×p`) for the MinCut-family pools.
    pub assignment: Option<Var>,
    /// Surviving node indices for the drop-based pools.
    pub kept: Option<Vec<usize>>,
}

/// Sizes a [`Pool`] needs at construction.
#[derive(Clone, Copy, Debug)]
pub struct PoolShape {
    pub dim: usize,
    pub keep: usize,
    pub clusters: usize,
    pub heads: usize,
    pub scaled: bool,
    pub relu_only: bool,
}

impl Pool {
    pub fn new(
        kind: PoolKind,
        store: &mut ParamStore,
        prefix: &str,
        shape: PoolShape,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let PoolShape {
            dim,
            keep,
            clusters,
            ..
        } = shape;
        if kind.is_drop_based() && keep == 0 {
            return Err(Error::config("pool keep count must be at least 1"));
        }
        if !kind.is_drop_based() && clusters == 0 {
            return Err(Error::config("pool cluster count must be at least 1"));
        }
        let weight = |store: &mut ParamStore, rng: &mut _| {
            store.insert(format!("{prefix}.w"), glorot_uniform(dim, clusters, rng))
        };
        Ok(match kind {
            PoolKind::Drop => Pool::Drop { keep },
            PoolKind::Sort => Pool::Sort { keep },
            PoolKind::GcMinCut => Pool::GcMinCut {
                weight: weight(store, rng)?,
                clusters,
                relu_only: shape.relu_only,
            },
            PoolKind::Diff => Pool::Diff {
                weight: weight(store, rng)?,
                clusters,
            },
            PoolKind::MinCut => Pool::MinCut {
                weight: weight(store, rng)?,
                clusters,
            },
            PoolKind::TopK => Pool::TopK {
                scorer: store.insert(format!("{prefix}.score"), glorot_uniform(dim, 1, rng))?,
                keep,
            },
            PoolKind::Sag => Pool::Sag {
                scorer: store.insert(format!("{prefix}.score"), glorot_uniform(dim, 1, rng))?,
                keep,
            },
            PoolKind::Gm => Pool::Gm {
                seeds: store.insert(format!("{prefix}.seeds"), normal(clusters, dim, 0.02, rng))?,
                attention: MultiHeadWeights::new(
                    store,
                    &format!("{prefix}.attn"),
                    dim,
                    shape.heads,
                    shape.scaled,
                    rng,
                )?,
            },
        })
    }

    pub fn kind(&self) -> PoolKind {
        match self {
            Pool::Drop { .. } => PoolKind::Drop,
            Pool::GcMinCut { .. } => PoolKind::GcMinCut,
            Pool::Sort { .. } => PoolKind::Sort,
            Pool::TopK { .. } => PoolKind::TopK,
            Pool::Sag { .. } => PoolKind::Sag,
            Pool::Diff { .. } => PoolKind::Diff,
            Pool::MinCut { .. } => PoolKind::MinCut,
            Pool::Gm { .. } => PoolKind::Gm,
        }
    }

    /// Pools `h` (`|V|×d`). `norm_adj` is `Â` of the same graph.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        h: Var,
        norm_adj: Var,
        sampler: &mut NodeSampler<'_>,
    ) -> Result<PoolOutput> {
        let [n, _] = tape.shape(h);
        let [an, am] = tape.shape(norm_adj);
        if an != n || am != n {
            return Err(Error::Shape {
                op: "pool adjacency",
                lhs: tape.shape(h),
                rhs: [an, am],
            });
        }
        match self {
            Pool::Drop { keep } => {
                let kept = match sampler {
                    NodeSampler::Random(rng) => drop_select(n, *keep, *rng),
                    NodeSampler::Fixed(idx) => {
                        if idx.iter().any(|&i| i >= n) {
                            return Err(Error::contract("fixed drop selection out of range"));
                        }
                        idx.to_vec()
                    }
                };
                let pooled = tape.gather_rows(h, &kept)?;
                Ok(PoolOutput {
                    pooled,
                    assignment: None,
                    kept: Some(kept),
                })
            }
            Pool::GcMinCut {
                weight,
                clusters,
                relu_only,
            } => {
                let w = tape.param(*weight)?;
                let hw = tape.matmul(h, w)?;
                let logits = tape.matmul(norm_adj, hw)?;
                let r = tape.relu(logits)?;
                let s = if *relu_only {
                    let mut fill = Tensor::zeros(n, *clusters);
                    let rv = tape.value(r);
                    for i in 0..n {
                        if rv.row(i).iter().all(|&v| v == 0.0) {
                            fill.row_mut(i).fill(1.0 / *clusters as f64);
                        }
                    }
                    let fill = tape.constant(fill)?;
                    tape.add(r, fill)?
                } else {
                    tape.softmax_rows(r)?
                };
                cluster_output(tape, s, h)
            }
            Pool::MinCut { weight, .. } => {
                let w = tape.param(*weight)?;
                let logits = tape.matmul(h, w)?;
                let s = tape.softmax_rows(logits)?;
                cluster_output(tape, s, h)
            }
            Pool::Diff { weight, .. } => {
                let w = tape.param(*weight)?;
                let hw = tape.matmul(h, w)?;
                let logits = tape.matmul(norm_adj, hw)?;
                let s = tape.softmax_rows(logits)?;
                let pooled = tape.matmul_tn(s, h)?;
                Ok(PoolOutput {
                    pooled,
                    assignment: None,
                    kept: None,
                })
            }
            Pool::Sort { keep } => {
                let hv = tape.value(h);
                let last: Vec<f64> = (0..n).map(|i| hv.get(i, hv.cols() - 1)).collect();
                let kept = top_k_indices(&last, *keep);
                let pooled = tape.gather_rows(h, &kept)?;
                Ok(PoolOutput {
                    pooled,
                    assignment: None,
                    kept: Some(kept),
                })
            }
            Pool::TopK { scorer, keep } => {
                let p = tape.param(*scorer)?;
                let raw = tape.matmul(h, p)?;
                let sq = tape.mul(p, p)?;
                let sq = tape.sum(sq)?;
                let norm = tape.sqrt(sq)?;
                let scores = tape.div_scalar(raw, norm)?;
                gated_top_k(tape, h, scores, *keep)
            }
            Pool::Sag { scorer, keep } => {
                let theta = tape.param(*scorer)?;
                let ht = tape.matmul(h, theta)?;
                let scores = tape.matmul(norm_adj, ht)?;
                gated_top_k(tape, h, scores, *keep)
            }
            Pool::Gm { seeds, attention } => {
                let seeds = tape.param(*seeds)?;
                let conv = tape.matmul(norm_adj, h)?;
                let pooled = attention.attend(tape, seeds, conv, conv)?;
                Ok(PoolOutput {
                    pooled,
                    assignment: None,
                    kept: None,
                })
            }
        }
    }
}

fn cluster_output(tape: &mut Tape<'_>, s: Var, h: Var) -> Result<PoolOutput> {
    let pooled = tape.matmul_tn(s, h)?;
    Ok(PoolOutput {
        pooled,
        assignment: Some(s),
        kept: None,
    })
}

fn gated_top_k(tape: &mut Tape<'_>, h: Var, scores: Var, keep: usize) -> Result<PoolOutput> {
    let kept = top_k_indices(tape.value(scores).data(), keep);
    let rows = tape.gather_rows(h, &kept)?;
    let sel = tape.gather_rows(scores, &kept)?;
    let gate = tape.tanh(sel)?;
    let pooled = tape.mul_col(rows, gate)?;
    Ok(PoolOutput {
        pooled,
        assignment: None,
        kept: Some(kept),
    })
}
