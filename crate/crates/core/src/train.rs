//! Cross-validated training and evaluation.
//!
//! Each `(run, fold)` trains a fresh model on the other folds and scores
//! the held-out fold. A batch is a gradient-accumulation group: every
//! sample gets its own tape, possibly on a worker thread, and the
//! per-sample gradients are summed in sample order before one Adam step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{build_graph, TileGraph};
use crate::loss::LossWeights;
use crate::metrics::{compute_metrics, MetricsRecord, MetricsReport};
use crate::model::{BranchConfig, ModelConfig, MulgtModel, SampleLabels, Task};
use crate::optim::{Adam, AdamConfig};
use crate::pooling::{NodeSampler, PoolKind};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Which task branches a model carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Paradigm {
    #[default]
    #[serde(rename = "multi")]
    Multi,
    #[serde(rename = "single:type")]
    SingleTyping,
    #[serde(rename = "single:stage")]
    SingleStaging,
}

impl Paradigm {
    pub fn tasks(self) -> &'static [Task] {
        match self {
            Paradigm::Multi => &Task::ALL,
            Paradigm::SingleTyping => &[Task::Typing],
            Paradigm::SingleStaging => &[Task::Staging],
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Multi => "multi",
            Paradigm::SingleTyping => "single:type",
            Paradigm::SingleStaging => "single:stage",
        })
    }
}

impl FromStr for Paradigm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Paradigm::Multi),
            "single:type" | "single:typing" => Ok(Paradigm::SingleTyping),
            "single:stage" | "single:staging" => Ok(Paradigm::SingleStaging),
            _ => Err(Error::config(format!(
                "unknown paradigm {s:?} (multi, single:type, single:stage)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub folds: usize,
    pub runs: usize,
    /// Run `r` initializes its models from `seed + r`.
    pub seed: u64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub paradigm: Paradigm,
    pub typing_pool: PoolKind,
    pub staging_pool: PoolKind,
    /// Model hyperparameters. `input_dim`, `seed` and `branches` are filled
    /// in per run from the dataset and the fields above.
    pub model: ModelConfig,
    /// Drop draws averaged by the `avg` evaluation variant.
    pub eval_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            folds: 5,
            runs: 3,
            seed: 0,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            paradigm: Paradigm::Multi,
            typing_pool: Task::Typing.default_pool(),
            staging_pool: Task::Staging.default_pool(),
            model: ModelConfig::default(),
            eval_draws: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("folds", self.folds),
            ("runs", self.runs),
            ("eval_draws", self.eval_draws),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        self.adam.validate()?;
        self.weights.validate()
    }

    pub fn branches(&self) -> Vec<BranchConfig> {
        self.paradigm
            .tasks()
            .iter()
            .map(|&task| BranchConfig {
                task,
                classes: 2,
                pooling: match task {
                    Task::Typing => self.typing_pool,
                    Task::Staging => self.staging_pool,
                },
            })
            .collect()
    }

    pub fn model_config(&self, input_dim: usize, run: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            seed: self.seed.wrapping_add(run as u64),
            branches: self.branches(),
            ..self.model.clone()
        }
    }
}

/// Mixes a sequence of integers into one seed (SplitMix64 finalizer per
/// step), so seeds for different `(run, fold, epoch, sample)` tuples are
/// unrelated.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x6A09_E667_F3BC_C908;
    for &p in parts {
        h = h.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn id_hash(id: &str) -> u64 {
    // FNV-1a
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Worker pool capped by `MULGT_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MULGT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::config(format!("MULGT_THREADS={v:?} is not a count")))?;
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Builds every sample's graph once.
pub fn build_graphs(ds: &Dataset) -> Result<Vec<TileGraph>> {
    ds.samples.iter().map(|s| build_graph(&s.grid)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub run: usize,
    pub fold: usize,
    pub epoch: usize,
    /// Mean total loss over the epoch's samples.
    pub loss: f64,
}

/// One trained `(run, fold)` model.
pub struct FoldOutcome {
    pub run: usize,
    pub fold: usize,
    pub model: MulgtModel,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: MetricsReport,
    pub history: Vec<EpochStats>,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Tensor>,
}

fn sample_grad(
    model: &MulgtModel,
    graph: &TileGraph,
    labels: &SampleLabels,
    weights: &LossWeights,
    seed: u64,
) -> Result<SampleGrad> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::with_params(model.params());
    let loss = model.sample_loss(
        &mut tape,
        graph,
        labels,
        weights,
        &mut NodeSampler::Random(&mut rng),
    )?;
    let grads = tape.backward(loss.total)?;
    Ok(SampleGrad {
        loss: tape.value(loss.total).item(),
        grads: grads.params(&tape),
    })
}

/// Trains `model` in place on `train_idx` for `cfg.epochs` epochs.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &mut MulgtModel,
    cfg: &TrainConfig,
    ds: &Dataset,
    graphs: &[TileGraph],
    train_idx: &[usize],
    run: usize,
    fold: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<EpochStats>> {
    let mut adam = Adam::new(cfg.adam, model.params())?;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.to_vec();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            cfg.seed,
            run as u64,
            fold as u64,
            epoch as u64,
        ]));
        order.copy_from_slice(train_idx);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let m: &MulgtModel = model;
            let results: Vec<Result<SampleGrad>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let seed = derive_seed(&[
                            cfg.seed,
                            run as u64,
                            fold as u64,
                            epoch as u64,
                            i as u64,
                            1,
                        ]);
                        sample_grad(m, &graphs[i], &ds.samples[i].labels, &cfg.weights, seed)
                    })
                    .collect()
            });
            let mut sum: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let r = r.map_err(|e| match e {
                    Error::NonFinite { op } => Error::Diverged(format!(
                        "non-finite {op} in run {run}, fold {fold}, epoch {epoch}"
                    )),
                    other => other,
                })?;
                batch_loss += r.loss;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {batch_loss} in run {run}, fold {fold}, epoch {epoch}"
                )));
            }
            epoch_loss += batch_loss;
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.scale_assign(scale);
            }
            adam.step(model.params_mut(), &grads).map_err(|e| match e {
                Error::Diverged(msg) => {
                    Error::Diverged(format!("{msg} in run {run}, fold {fold}, epoch {epoch}"))
                }
                other => other,
            })?;
        }
        history.push(EpochStats {
            run,
            fold,
            epoch,
            loss: epoch_loss / order.len().max(1) as f64,
        });
    }
    Ok(history)
}

/// How the random node drop is resolved at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalVariant {
    /// One draw seeded by the sample id.
    Seeded,
    /// Class probabilities averaged over several draws.
    Averaged(usize),
}

impl EvalVariant {
    pub fn name(self) -> String {
        match self {
            EvalVariant::Seeded => "seeded".into(),
            EvalVariant::Averaged(n) => format!("avg{n}"),
        }
    }
}

/// Positive-class probability per task for one sample.
pub fn score_sample(
    model: &MulgtModel,
    graph: &TileGraph,
    sample_id: &str,
    variant: EvalVariant,
    seed: u64,
) -> Result<Vec<(Task, f64)>> {
    let draws = match variant {
        EvalVariant::Seeded => 1,
        EvalVariant::Averaged(n) => n.max(1),
    };
    let mut acc: Vec<(Task, f64)> = Vec::new();
    for draw in 0..draws {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[seed, id_hash(sample_id), draw as u64]));
        let probs = model.predict_proba(graph, &mut NodeSampler::Random(&mut rng))?;
        if acc.is_empty() {
            acc = probs.iter().map(|(t, _)| (*t, 0.0)).collect();
        }
        for ((_, a), (_, p)) in acc.iter_mut().zip(&probs) {
            *a += p[1];
        }
    }
    for (_, a) in &mut acc {
        *a /= draws as f64;
    }
    Ok(acc)
}

/// Scores `indices` and appends one record per task.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &MulgtModel,
    ds: &Dataset,
    graphs: &[TileGraph],
    indices: &[usize],
    variant: EvalVariant,
    seed: u64,
    run: usize,
    fold: usize,
    pool: &rayon::ThreadPool,
) -> Result<Vec<MetricsRecord>> {
    let scored: Vec<Result<Vec<(Task, f64)>>> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| score_sample(model, &graphs[i], &ds.samples[i].id, variant, seed))
            .collect()
    });
    let scored = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let tasks: Vec<Task> = model.tasks().collect();
    Ok(tasks
        .iter()
        .enumerate()
        .map(|(k, &task)| {
            let scores: Vec<f64> = scored.iter().map(|s| s[k].1).collect();
            let labels: Vec<bool> = indices
                .iter()
                .map(|&i| ds.samples[i].labels.get(task) == 1)
                .collect();
            MetricsRecord {
                run,
                fold,
                task: task.name().into(),
                variant: variant.name(),
                samples: indices.len(),
                metrics: compute_metrics(&scores, &labels),
            }
        })
        .collect())
}

/// Full protocol. `on_fold` sees every trained model (e.g. to checkpoint
/// it) before it is dropped.
pub fn train_with(
    cfg: &TrainConfig,
    data: &Dataset,
    mut on_fold: impl FnMut(&FoldOutcome) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("dataset has no samples"));
    }
    let reassigned;
    let ds = if data.folds == cfg.folds {
        data
    } else {
        let mut d = data.clone();
        d.assign_folds(cfg.folds, cfg.seed)?;
        reassigned = d;
        &reassigned
    };
    let input_dim = ds.samples[0].grid.dim();
    if let Some(s) = ds.samples.iter().find(|s| s.grid.dim() != input_dim) {
        return Err(Error::contract(format!(
            "sample {} has feature width {}",
            s.id,
            s.grid.dim()
        )));
    }
    let graphs = build_graphs(ds)?;
    let pool = thread_pool()?;
    let mut report = TrainReport::default();
    for run in 0..cfg.runs {
        for fold in 0..cfg.folds {
            let (train_idx, test_idx) = ds.split(fold);
            let mut model = MulgtModel::new(cfg.model_config(input_dim, run))?;
            let history = fit(&mut model, cfg, ds, &graphs, &train_idx, run, fold, &pool)?;
            report.history.extend(history);
            for variant in [EvalVariant::Seeded, EvalVariant::Averaged(cfg.eval_draws)] {
                for rec in evaluate(
                    &model, ds, &graphs, &test_idx, variant, cfg.seed, run, fold, &pool,
                )? {
                    report.metrics.push(rec);
                }
            }
            on_fold(&FoldOutcome { run, fold, model })?;
        }
    }
    Ok(report)
}

pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<TrainReport> {
    train_with(cfg, data, |_| Ok(()))
}
