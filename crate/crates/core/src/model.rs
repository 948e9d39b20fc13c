//! The full network: shared GCN, then per task branch knowledge injection,
//! pooling, a transformer over `[CLS; pooled]`, and an MLP head on the CLS
//! output.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadWeights;
use crate::error::{Error, Result};
use crate::gcn::GcnStack;
use crate::graph::TileGraph;
use crate::injection::{InjectionBlock, InjectionKind, TokenBank, TokenScheme};
use crate::layers::{FeedForward, LayerNorm, Linear};
use crate::loss::{mincut_loss, total_loss, LossWeights};
use crate::params::{normal, ParamStore};
use crate::pooling::{NodeSampler, Pool, PoolKind, PoolShape};
use crate::tape::{softmax_rows, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Typing,
    Staging,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Typing, Task::Staging];

    pub fn name(self) -> &'static str {
        match self {
            Task::Typing => "typing",
            Task::Staging => "staging",
        }
    }

    /// Pooling each task uses unless overridden.
    pub fn default_pool(self) -> PoolKind {
        match self {
            Task::Typing => PoolKind::Drop,
            Task::Staging => PoolKind::GcMinCut,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "typing" | "type" => Ok(Task::Typing),
            "staging" | "stage" => Ok(Task::Staging),
            _ => Err(Error::config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub task: Task,
    pub classes: usize,
    pub pooling: PoolKind,
}

impl BranchConfig {
    pub fn binary(task: Task) -> Self {
        BranchConfig {
            task,
            classes: 2,
            pooling: task.default_pool(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the ingested node features.
    pub input_dim: usize,
    /// Working width `d`.
    pub dim: usize,
    pub gcn_depth: usize,
    pub heads: usize,
    /// Latent tokens per bank (`m`).
    pub tokens: usize,
    /// Clusters of the cluster-based pools (`p`).
    pub clusters: usize,
    /// Rows kept by the drop-based pools (`k`).
    pub keep: usize,
    pub transformer_depth: usize,
    /// Scale attention logits by `1/sqrt(d/h)`.
    pub scaled_attention: bool,
    pub token_scheme: TokenScheme,
    pub injection: InjectionKind,
    /// Use `ReLU(Â Ĥ W)` itself as the staging assignment instead of its
    /// row softmax.
    pub relu_only_assignment: bool,
    pub branches: Vec<BranchConfig>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 1024,
            dim: 128,
            gcn_depth: 2,
            heads: 4,
            tokens: 150,
            clusters: 100,
            keep: 100,
            transformer_depth: 2,
            scaled_attention: true,
            token_scheme: TokenScheme::Specific,
            injection: InjectionKind::Attention,
            relu_only_assignment: false,
            branches: Task::ALL.iter().map(|&t| BranchConfig::binary(t)).collect(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("dim", self.dim),
            ("gcn_depth", self.gcn_depth),
            ("heads", self.heads),
            ("tokens", self.tokens),
            ("clusters", self.clusters),
            ("keep", self.keep),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.branches.is_empty() {
            return Err(Error::config("at least one task branch is required"));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.classes < 2 {
                return Err(Error::config(format!(
                    "{} needs at least two classes",
                    b.task
                )));
            }
            if self.branches[..i].iter().any(|o| o.task == b.task) {
                return Err(Error::config(format!("task {} configured twice", b.task)));
            }
        }
        Ok(())
    }

    pub fn branch(&self, task: Task) -> Option<&BranchConfig> {
        self.branches.iter().find(|b| b.task == task)
    }
}

/// Transformer stack over `[CLS; pooled]` and the MLP head on the CLS row.
/// No positional embeddings are added anywhere.
#[derive(Clone, Debug)]
pub struct TransformerHead {
    cls: crate::params::ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: LayerNorm,
    attention: MultiHeadWeights,
    norm2: LayerNorm,
    ff: FeedForward,
}

impl TransformerHead {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        let cls = store.insert(format!("{prefix}.cls"), normal(1, d, 0.02, rng))?;
        let layers = (0..cfg.transformer_depth)
            .map(|l| {
                let p = format!("{prefix}.l{l}");
                Ok(EncoderLayer {
                    norm1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    attention: MultiHeadWeights::new(
                        store,
                        &format!("{p}.attn"),
                        d,
                        cfg.heads,
                        cfg.scaled_attention,
                        rng,
                    )?,
                    norm2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, 2 * d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{prefix}.ln_f"), d)?;
        let mid = (d / 2).max(1);
        let hidden = Linear::new(store, &format!("{prefix}.mlp.fc1"), d, mid, rng)?;
        // Zero-initialized output layer: an untrained head predicts uniformly.
        let out = Linear::zeros(store, &format!("{prefix}.mlp.out"), mid, classes)?;
        Ok(TransformerHead {
            cls,
            layers,
            final_norm,
            hidden,
            out,
        })
    }

    /// Runs the encoder on `[CLS; tokens]` and returns the `1×C` logits
    /// read from the CLS position.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<Var> {
        let cls = tape.param(self.cls)?;
        let mut x = tape.concat_rows(&[cls, tokens])?;
        for layer in &self.layers {
            let a = layer.norm1.forward(tape, x)?;
            let a = layer.attention.attend(tape, a, a, a)?;
            x = tape.add(x, a)?;
            let f = layer.norm2.forward(tape, x)?;
            let f = layer.ff.forward(tape, f)?;
            x = tape.add(x, f)?;
        }
        let x = self.final_norm.forward(tape, x)?;
        let cls_out = tape.gather_rows(x, &[0])?;
        let h = self.hidden.forward(tape, cls_out)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
struct Branch {
    config: BranchConfig,
    bank: Option<TokenBank>,
    injection: InjectionBlock,
    pool: Pool,
    head: TransformerHead,
}

#[derive(Clone, Debug)]
pub struct MulgtModel {
    config: ModelConfig,
    params: ParamStore,
    gcn: GcnStack,
    branches: Vec<Branch>,
}

pub struct BranchOutput {
    pub task: Task,
    /// `1×C` logits.
    pub logits: Var,
    /// Task-specific node features after injection (`|V|×d`).
    pub embedding: Var,
    pub pooled: Var,
    pub assignment: Option<Var>,
    pub kept: Option<Vec<usize>>,
}

pub struct ForwardOutput {
    pub shared: Var,
    pub branches: Vec<BranchOutput>,
}

impl ForwardOutput {
    pub fn branch(&self, task: Task) -> Option<&BranchOutput> {
        self.branches.iter().find(|b| b.task == task)
    }
}

/// Slide-level labels, one per task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLabels {
    pub typing: usize,
    pub staging: usize,
}

impl SampleLabels {
    pub fn get(&self, task: Task) -> usize {
        match task {
            Task::Typing => self.typing,
            Task::Staging => self.staging,
        }
    }
}

/// Per-sample loss pieces, all on the same tape.
pub struct SampleLoss {
    pub total: Var,
    pub typing: Option<Var>,
    pub staging: Option<Var>,
    pub mincut: Option<Var>,
    pub output: ForwardOutput,
}

impl MulgtModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let gcn = GcnStack::new(
            &mut params,
            "shared.gcn",
            config.input_dim,
            config.dim,
            config.gcn_depth,
            &mut rng,
        )?;
        let uses_tokens = config.injection == InjectionKind::Attention;
        let shared_bank = if uses_tokens && config.token_scheme == TokenScheme::Shared {
            Some(TokenBank::new(
                &mut params,
                "shared.tokens",
                config.tokens,
                config.dim,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut branches = Vec::with_capacity(config.branches.len());
        for bc in &config.branches {
            let prefix = bc.task.name();
            let bank = match (&shared_bank, uses_tokens) {
                (Some(b), _) => Some(b.clone()),
                (None, true) => Some(TokenBank::new(
                    &mut params,
                    &format!("{prefix}.tokens"),
                    config.tokens,
                    config.dim,
                    &mut rng,
                )?),
                (None, false) => None,
            };
            let injection = InjectionBlock::new(
                &mut params,
                &format!("{prefix}.inject"),
                config.injection,
                config.dim,
                config.heads,
                config.scaled_attention,
                &mut rng,
            )?;
            let pool = Pool::new(
                bc.pooling,
                &mut params,
                &format!("{prefix}.pool"),
                PoolShape {
                    dim: config.dim,
                    keep: config.keep,
                    clusters: config.clusters,
                    heads: config.heads,
                    scaled: config.scaled_attention,
                    relu_only: config.relu_only_assignment,
                },
                &mut rng,
            )?;
            let head = TransformerHead::new(
                &mut params,
                &format!("{prefix}.tf"),
                &config,
                bc.classes,
                &mut rng,
            )?;
            branches.push(Branch {
                config: bc.clone(),
                bank,
                injection,
                pool,
                head,
            });
        }
        Ok(MulgtModel {
            config,
            params,
            gcn,
            branches,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn gcn(&self) -> &GcnStack {
        &self.gcn
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.branches.iter().map(|b| b.config.task)
    }

    /// Parameter names owned by one task branch (not the shared encoder,
    /// and not a bank shared between branches).
    pub fn branch_param_names(&self, task: Task) -> Vec<String> {
        let prefix = format!("{}.", task.name());
        self.params
            .iter()
            .filter(|(_, n, _)| n.starts_with(&prefix))
            .map(|(_, n, _)| n.to_string())
            .collect()
    }

    /// Runs every branch on `graph`. Drop-based pools take their subset
    /// from `sampler`, one draw per branch in branch order.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        graph: &TileGraph,
        sampler: &mut NodeSampler<'_>,
    ) -> Result<ForwardOutput> {
        if graph.feature_dim() != self.config.input_dim {
            return Err(Error::Shape {
                op: "model input",
                lhs: graph.node_features().shape(),
                rhs: [graph.num_nodes(), self.config.input_dim],
            });
        }
        let feats = tape.constant(graph.node_features().clone())?;
        let adj = tape.constant(graph.norm_adj().clone())?;
        let shared = self.gcn.forward(tape, adj, feats)?;
        let mut outputs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let embedding = b.injection.inject(tape, b.bank.as_ref(), shared)?;
            let pooled = b.pool.forward(tape, embedding, adj, sampler)?;
            let logits = b.head.forward(tape, pooled.pooled)?;
            outputs.push(BranchOutput {
                task: b.config.task,
                logits,
                embedding,
                pooled: pooled.pooled,
                assignment: pooled.assignment,
                kept: pooled.kept,
            });
        }
        Ok(ForwardOutput {
            shared,
            branches: outputs,
        })
    }

    /// Weighted sum of the task cross-entropies and the MinCut terms of
    /// every branch that produced an assignment.
    pub fn sample_loss(
        &self,
        tape: &mut Tape<'_>,
        graph: &TileGraph,
        labels: &SampleLabels,
        weights: &LossWeights,
        sampler: &mut NodeSampler<'_>,
    ) -> Result<SampleLoss> {
        let output = self.forward(tape, graph, sampler)?;
        let (mut typing, mut staging, mut mincut) = (None, None, None);
        let mut graph_mats = None;
        for b in &output.branches {
            let ce = tape.cross_entropy(b.logits, &[labels.get(b.task)])?;
            match b.task {
                Task::Typing => typing = Some(ce),
                Task::Staging => staging = Some(ce),
            }
            if let Some(s) = b.assignment {
                let (a, d) = match graph_mats {
                    Some(m) => m,
                    None => {
                        let a = tape.constant(graph.adjacency_with_self_loops())?;
                        let d = tape.constant(graph.degree_matrix())?;
                        graph_mats = Some((a, d));
                        (a, d)
                    }
                };
                let terms = mincut_loss(tape, s, a, d)?;
                mincut = Some(match mincut {
                    Some(m) => tape.add(m, terms.total)?,
                    None => terms.total,
                });
            }
        }
        let total = total_loss(tape, typing, staging, mincut, weights)?;
        Ok(SampleLoss {
            total,
            typing,
            staging,
            mincut,
            output,
        })
    }

    /// Class probabilities per task, in branch order.
    pub fn predict_proba(
        &self,
        graph: &TileGraph,
        sampler: &mut NodeSampler<'_>,
    ) -> Result<Vec<(Task, Vec<f64>)>> {
        let mut tape = Tape::with_params(&self.params);
        let out = self.forward(&mut tape, graph, sampler)?;
        Ok(out
            .branches
            .iter()
            .map(|b| (b.task, softmax_rows(tape.value(b.logits)).into_data()))
            .collect())
    }
}
