mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mulgt::data::{
    generate, load_checkpoint, save_checkpoint, Dataset, EmbeddingSet, SyntheticSpec,
};
use mulgt::gradcheck::{gradcheck, GradcheckConfig};
use mulgt::injection::{InjectionKind, TokenScheme};
use mulgt::metrics::MetricsReport;
use mulgt::train::{
    build_graphs, evaluate, thread_pool, train_with, EvalVariant, Paradigm, TrainConfig,
};
use mulgt::{NodeSampler, PoolKind, Result, Tape};
use rand::SeedableRng;
use serde_json::json;

use crate::args::TrainArgs;

/// Multi-task graph-transformer for slide-level typing and staging.
///
/// Binary tasks use class 1 as the positive class for F1: the second tumor
/// type for typing and the late stage for staging.
#[derive(Parser, Debug)]
#[command(name = "mulgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-signal synthetic dataset.
    Synth(SynthArgs),
    /// Cross-validated training; writes metrics, history and checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mulgt-out")]
        out: PathBuf,
        /// Skip writing per-fold checkpoints.
        #[arg(long)]
        no_checkpoints: bool,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on a dataset (or one of its folds).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Only score this fold.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        draws: usize,
        /// Write the records here as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full model.
    Gradcheck(GradcheckArgs),
    /// Dump every branch's node embeddings after knowledge injection.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a configuration sweep and tabulate the results.
    Ablate {
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "mulgt-ablation")]
        out: PathBuf,
        /// Pool standing in for "drop-based" in the modules study.
        #[arg(long, default_value = "topk")]
        drop_baseline: PoolKind,
        /// Pool standing in for "cluster-based" in the modules study.
        #[arg(long, default_value = "mincut")]
        cluster_baseline: PoolKind,
        #[command(flatten)]
        train: TrainArgs,
    },
}

#[derive(clap::Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON spec; explicit flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    occupancy: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 12)]
    nodes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Node feature width; defaults to --dim.
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    gcn_layers: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    keep: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 1)]
    depth: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Study {
    /// Pooling and injection variants.
    Modules,
    /// Single-task versus multi-task.
    Paradigm,
    /// Shared versus task-specific token banks.
    Tokens,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train {
            data,
            out,
            no_checkpoints,
            train,
        } => {
            let ds = Dataset::load(&data)?;
            let report = train_to_dir(&train.to_config(), &ds, &data, &out, !no_checkpoints)?;
            print!("{}", report.table());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            data,
            fold,
            seed,
            draws,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let graphs = build_graphs(&ds)?;
            let indices: Vec<usize> = match fold {
                Some(f) => ds.split(f).1,
                None => (0..ds.len()).collect(),
            };
            let pool = thread_pool()?;
            let mut report = MetricsReport::default();
            for variant in [EvalVariant::Seeded, EvalVariant::Averaged(draws)] {
                for r in evaluate(
                    &model,
                    &ds,
                    &graphs,
                    &indices,
                    variant,
                    seed,
                    0,
                    fold.unwrap_or(0),
                    &pool,
                )? {
                    report.push(r);
                }
            }
            if let Some(out) = out {
                fs::write(out, report.to_jsonl())?;
            }
            print!("{}", report.table());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck(a) => {
            let report = gradcheck(&GradcheckConfig {
                nodes: a.nodes,
                input_dim: a.input_dim.unwrap_or(a.dim),
                dim: a.dim,
                gcn_depth: a.gcn_layers,
                heads: a.heads,
                tokens: a.tokens,
                keep: a.keep,
                clusters: a.clusters,
                transformer_depth: a.depth,
                step: a.step,
                tolerance: a.tol,
                seed: a.seed,
            })?;
            for c in &report.checks {
                println!("{:<32} rel_err {:.3e}", c.name, c.rel_error);
            }
            println!(
                "max rel_err {:.3e} (tolerance {:.1e}): {}",
                report.max_rel_error,
                report.tolerance,
                if report.passed { "ok" } else { "FAILED" }
            );
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::ExportEmbeddings {
            checkpoint,
            data,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&data)?;
            let graphs = build_graphs(&ds)?;
            let mut set = EmbeddingSet::default();
            for (s, g) in ds.samples.iter().zip(&graphs) {
                // Embeddings precede pooling, so the drop draw does not matter.
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
                let mut tape = Tape::with_params(model.params());
                let fwd = model.forward(&mut tape, g, &mut NodeSampler::Random(&mut rng))?;
                for b in &fwd.branches {
                    set.push(&s.id, b.task.name(), tape.value(b.embedding).clone());
                }
            }
            set.save(&out)?;
            println!(
                "wrote {} embeddings to {}",
                set.entries.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            study,
            data,
            out,
            drop_baseline,
            cluster_baseline,
            train,
        } => {
            let ds = Dataset::load(&data)?;
            let base = train.to_config();
            fs::create_dir_all(&out)?;
            let mut table = String::new();
            let mut summary = String::new();
            for (name, cfg) in ablation_configs(study, &base, drop_baseline, cluster_baseline) {
                eprintln!("== {name}");
                let report = train_to_dir(&cfg, &ds, &data, &out.join(&name), false)?;
                table.push_str(&format!("[{name}]\n{}\n", report.table()));
                for s in report.summary() {
                    summary.push_str(&serde_json::to_string(
                        &json!({ "config": name, "summary": s }),
                    )?);
                    summary.push('\n');
                }
            }
            fs::write(out.join("ablation.txt"), &table)?;
            fs::write(out.join("ablation.jsonl"), summary)?;
            print!("{table}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec = match &a.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => SyntheticSpec::default(),
    };
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {
            $(if let Some(v) = $arg { spec.$field = v; })*
        };
    }
    set!(samples <- a.samples, seed <- a.seed, rows <- a.rows, cols <- a.cols, dim <- a.dim,
         noise_std <- a.noise, rho <- a.rho, occupancy <- a.occupancy, folds <- a.folds);
    let ds = generate(&spec)?;
    ds.save(&a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

/// Trains and writes `manifest.json`, `metrics.jsonl`, `history.jsonl`,
/// `summary.txt` and optionally `checkpoints/` under `out`.
fn train_to_dir(
    cfg: &TrainConfig,
    ds: &Dataset,
    data: &Path,
    out: &Path,
    checkpoints: bool,
) -> Result<MetricsReport> {
    fs::create_dir_all(out)?;
    let input_dim = ds.samples.first().map_or(0, |s| s.grid.dim());
    let manifest = json!({
        "command": "train",
        "data": data.display().to_string(),
        "samples": ds.len(),
        "config": cfg,
        "run_seeds": (0..cfg.runs).map(|r| cfg.seed.wrapping_add(r as u64)).collect::<Vec<_>>(),
        "model": cfg.model_config(input_dim, 0),
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    let ckpt_dir = out.join("checkpoints");
    if checkpoints {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let report = train_with(cfg, ds, |o| {
        if checkpoints {
            save_checkpoint(
                &o.model,
                ckpt_dir.join(format!("run{}_fold{}.mgtc", o.run, o.fold)),
            )?;
        }
        Ok(())
    })?;
    fs::write(out.join("metrics.jsonl"), report.metrics.to_jsonl())?;
    let history: String = report
        .history
        .iter()
        .map(|h| serde_json::to_string(h).map(|s| s + "\n"))
        .collect::<serde_json::Result<_>>()?;
    fs::write(out.join("history.jsonl"), history)?;
    fs::write(out.join("summary.txt"), report.metrics.table())?;
    Ok(report.metrics)
}

fn ablation_configs(
    study: Study,
    base: &TrainConfig,
    drop_baseline: PoolKind,
    cluster_baseline: PoolKind,
) -> Vec<(String, TrainConfig)> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match study {
        Study::Modules => vec![
            (
                format!("both-{drop_baseline}"),
                with(&|c| {
                    c.typing_pool = drop_baseline;
                    c.staging_pool = drop_baseline;
                    c.model.injection = InjectionKind::Identity;
                }),
            ),
            (
                format!("both-{cluster_baseline}"),
                with(&|c| {
                    c.typing_pool = cluster_baseline;
                    c.staging_pool = cluster_baseline;
                    c.model.injection = InjectionKind::Identity;
                }),
            ),
            (
                "domain-pool".into(),
                with(&|c| c.model.injection = InjectionKind::Identity),
            ),
            (
                "domain-pool+linear".into(),
                with(&|c| c.model.injection = InjectionKind::Linear),
            ),
            (
                "domain-pool+attention".into(),
                with(&|c| c.model.injection = InjectionKind::Attention),
            ),
        ],
        Study::Paradigm => vec![
            (
                "single-typing".into(),
                with(&|c| c.paradigm = Paradigm::SingleTyping),
            ),
            (
                "single-staging".into(),
                with(&|c| c.paradigm = Paradigm::SingleStaging),
            ),
            ("multi".into(), with(&|c| c.paradigm = Paradigm::Multi)),
        ],
        Study::Tokens => vec![
            (
                "shared".into(),
                with(&|c| c.model.token_scheme = TokenScheme::Shared),
            ),
            (
                "specific".into(),
                with(&|c| c.model.token_scheme = TokenScheme::Specific),
            ),
        ],
    }
}
