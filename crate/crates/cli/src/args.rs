use clap::{Args, ValueEnum};
use mulgt::injection::{InjectionKind, TokenScheme};
use mulgt::optim::AdamConfig;
use mulgt::train::{Paradigm, TrainConfig};
use mulgt::{ModelConfig, PoolKind};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeArg {
    Shared,
    Specific,
}

impl From<SchemeArg> for TokenScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Shared => TokenScheme::Shared,
            SchemeArg::Specific => TokenScheme::Specific,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InjectionArg {
    Attention,
    Linear,
    Identity,
}

impl From<InjectionArg> for InjectionKind {
    fn from(k: InjectionArg) -> Self {
        match k {
            InjectionArg::Attention => InjectionKind::Attention,
            InjectionArg::Linear => InjectionKind::Linear,
            InjectionArg::Identity => InjectionKind::Identity,
        }
    }
}

/// Training protocol and model hyperparameters shared by `train` and
/// `ablate`.
#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 3)]
    pub runs: usize,
    /// Base seed; run r initializes from seed + r.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Weight of the typing cross-entropy.
    #[arg(long, default_value_t = 1.0)]
    pub w_type: f64,
    /// Weight of the staging cross-entropy.
    #[arg(long, default_value_t = 1.0)]
    pub w_stage: f64,
    /// Weight of the MinCut regularizer.
    #[arg(long, default_value_t = 1.0)]
    pub w_mincut: f64,
    /// multi, single:type or single:stage.
    #[arg(long, default_value = "multi")]
    pub paradigm: Paradigm,
    /// Pooling of the typing branch (drop, gcmincut, sort, topk, sag, diff, mincut, gm).
    #[arg(long, default_value = "drop")]
    pub typing_pool: PoolKind,
    /// Pooling of the staging branch.
    #[arg(long, default_value = "gcmincut")]
    pub staging_pool: PoolKind,
    /// Working width d.
    #[arg(long, default_value_t = 128)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub gcn_layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Latent tokens per bank (m).
    #[arg(long, default_value_t = 150)]
    pub tokens: usize,
    /// Clusters of cluster-based pooling (p).
    #[arg(long, default_value_t = 100)]
    pub clusters: usize,
    /// Nodes kept by drop-based pooling (k).
    #[arg(long, default_value_t = 100)]
    pub keep: usize,
    /// Transformer layers per branch.
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, value_enum, default_value = "specific")]
    pub token_scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "attention")]
    pub injection: InjectionArg,
    /// Leave attention logits unscaled.
    #[arg(long)]
    pub unscaled_attention: bool,
    /// Use ReLU(ÂĤW) directly as the staging assignment.
    #[arg(long)]
    pub relu_only_assignment: bool,
    /// Drop draws averaged by the avg evaluation variant.
    #[arg(long, default_value_t = 8)]
    pub eval_draws: usize,
}

impl TrainArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            folds: self.folds,
            runs: self.runs,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
            },
            weights: mulgt::loss::LossWeights {
                typing: self.w_type,
                staging: self.w_stage,
                mincut: self.w_mincut,
            },
            paradigm: self.paradigm,
            typing_pool: self.typing_pool,
            staging_pool: self.staging_pool,
            model: ModelConfig {
                dim: self.dim,
                gcn_depth: self.gcn_layers,
                heads: self.heads,
                tokens: self.tokens,
                clusters: self.clusters,
                keep: self.keep,
                transformer_depth: self.depth,
                scaled_attention: !self.unscaled_attention,
                token_scheme: self.token_scheme.into(),
                injection: self.injection.into(),
                relu_only_assignment: self.relu_only_assignment,
                ..ModelConfig::default()
            },
            eval_draws: self.eval_draws,
        }
    }
}
