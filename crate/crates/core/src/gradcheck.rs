//! Whole-model gradient audit against central finite differences.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, FeatureGrid, TileGraph};
use crate::loss::LossWeights;
use crate::model::{BranchConfig, ModelConfig, MulgtModel, SampleLabels, Task};
use crate::pooling::NodeSampler;
use crate::tape::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    pub nodes: usize,
    pub input_dim: usize,
    pub dim: usize,
    pub gcn_depth: usize,
    pub heads: usize,
    pub tokens: usize,
    pub keep: usize,
    pub clusters: usize,
    pub transformer_depth: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            nodes: 12,
            input_dim: 8,
            dim: 8,
            gcn_depth: 2,
            heads: 2,
            tokens: 3,
            keep: 3,
            clusters: 2,
            transformer_depth: 1,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, taken as zero when both norms vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-10 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// A connected graph of `nodes` tiles: the first cells of a near-square
/// grid in row-major order, with standard normal features.
pub fn audit_graph(nodes: usize, dim: usize, rng: &mut impl Rng) -> Result<TileGraph> {
    if nodes == 0 {
        return Err(Error::config("gradcheck needs at least one node"));
    }
    let cols = (nodes as f64).sqrt().ceil() as usize;
    let rows = nodes.div_ceil(cols);
    let occupancy = (0..rows * cols).map(|i| i < nodes).collect();
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let features = (0..nodes)
        .map(|_| (0..dim).map(|_| normal.sample(rng)).collect())
        .collect();
    build_graph(&FeatureGrid::new(rows, cols, dim, occupancy, features)?)
}

/// Compares analytic and central-difference gradients of the total loss
/// for every parameter of `model`. Drop-based pools replay the fixed set
/// `kept` so the loss is a deterministic function of the parameters.
pub fn check_model(
    model: &mut MulgtModel,
    graph: &TileGraph,
    labels: &SampleLabels,
    weights: &LossWeights,
    kept: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    let loss_at = |m: &MulgtModel| -> Result<f64> {
        let mut tape = Tape::with_params(m.params());
        let l = m.sample_loss(
            &mut tape,
            graph,
            labels,
            weights,
            &mut NodeSampler::Fixed(kept),
        )?;
        Ok(tape.value(l.total).item())
    };
    let analytic = {
        let mut tape = Tape::with_params(model.params());
        let l = model.sample_loss(
            &mut tape,
            graph,
            labels,
            weights,
            &mut NodeSampler::Fixed(kept),
        )?;
        tape.backward(l.total)?.params(&tape)
    };
    let ids: Vec<_> = model.params().ids().collect();
    let mut checks = Vec::with_capacity(ids.len());
    for (k, id) in ids.into_iter().enumerate() {
        let len = model.params().get(id).len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + step;
            let up = loss_at(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig - step;
            let down = loss_at(model)?;
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = analytic[k].data();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        checks.push(ParamCheck {
            name: model.params().name(id).to_string(),
            rel_error: relative_error(a, &numeric),
            analytic_norm: norm(a),
            numeric_norm: norm(&numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: max_rel_error < tolerance,
        checks,
        max_rel_error,
        tolerance,
    })
}

/// Builds the audit model (both branches, default pools), perturbs every
/// parameter so no gradient is trivially zero, and checks it.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let graph = audit_graph(cfg.nodes, cfg.input_dim, &mut rng)?;
    let mut model = MulgtModel::new(ModelConfig {
        input_dim: cfg.input_dim,
        dim: cfg.dim,
        gcn_depth: cfg.gcn_depth,
        heads: cfg.heads,
        tokens: cfg.tokens,
        clusters: cfg.clusters,
        keep: cfg.keep,
        transformer_depth: cfg.transformer_depth,
        branches: Task::ALL.iter().map(|&t| BranchConfig::binary(t)).collect(),
        seed: cfg.seed,
        ..ModelConfig::default()
    })?;
    perturb(&mut model, 0.3, &mut rng);
    let kept = sorted_sample(&mut rng, graph.num_nodes(), cfg.keep);
    let labels = SampleLabels {
        typing: 1,
        staging: 0,
    };
    check_model(
        &mut model,
        &graph,
        &labels,
        &LossWeights::default(),
        &kept,
        cfg.step,
        cfg.tolerance,
    )
}

/// Adds `N(0, std)` noise to every parameter.
pub fn perturb(model: &mut MulgtModel, std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("valid normal");
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for v in model.params_mut().get_mut(id).data_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn sorted_sample(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    let mut idx = sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
