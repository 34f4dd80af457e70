//! Command-line pipeline: build a toy network, sample and evaluate a config
//! corpus, train a surrogate ensemble, construct op- or block-level
//! configurations from its scores, and compare against the corpus Pareto
//! frontier.
//!
//! Every command writes its outputs atomically, stamps them with a schema
//! version, and drops a run manifest with input/output digests next to its
//! primary output. Exit codes: 0 success, 2 usage, 3 data error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, Subcommand};

use quantsense::ensemble::{make_folds, train_ensemble, ScoreContext};
use quantsense::graph::{ToyFamily, ToyParams};
use quantsense::oracle::{evaluate_config, generate_corpus, pareto_frontier, TargetMode, ToyModel};
use quantsense::persist::{
    self, load_config, load_corpus, load_ensemble, load_graph_doc, save_config, save_corpus,
    save_ensemble, save_eval, save_graph_doc, write_config_summary_csv, write_frontier_csv,
    write_scores_csv, RunManifest,
};
use quantsense::sampler::SampleSpec;
use quantsense::surrogate::ranking::RankLossKind;
use quantsense::surrogate::{SurrogateSpec, TrainSpec};
use quantsense::Error;

#[derive(Parser)]
#[command(
    name = "quantsense",
    version,
    about = "Mixed-precision quantization search over toy networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug)]
enum Level {
    Op,
    Block,
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "op" => Ok(Level::Op),
            "block" => Ok(Level::Block),
            other => Err(format!("unknown level `{other}`, expected `op` or `block`")),
        }
    }
}

fn parse_family(s: &str) -> Result<ToyFamily, String> {
    ToyFamily::from_str(s).map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<TargetMode, String> {
    TargetMode::from_str(s).map_err(|e| e.to_string())
}

fn parse_rank_loss(s: &str) -> Result<RankLossKind, String> {
    RankLossKind::from_str(s).map_err(|e| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a toy network with frozen weights and its subgraph catalog.
    BuildGraph {
        #[arg(long, value_parser = parse_family)]
        family: ToyFamily,
        /// Repeated-block count of the family.
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        /// Hidden width of every weight tensor.
        #[arg(long, default_value_t = 8)]
        width: usize,
        /// Weight-generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample distinct quantization configs and evaluate them end to end.
    Corpus {
        /// Graph file from `build-graph`.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_configs: usize,
        /// Sampling seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bit-width penalty weight; derived from the corpus loss range when
        /// absent.
        #[arg(long)]
        lambda: Option<f64>,
        /// Target definition: `pure` (-loss) or `constrained` (-loss - lambda*bits).
        #[arg(long, value_parser = parse_mode, default_value = "pure")]
        mode: TargetMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a K-fold surrogate ensemble on a corpus.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_rank_loss, default_value = "hybrid")]
        rank_loss: RankLossKind,
        /// Message-passing depth.
        #[arg(long, default_value_t = 4)]
        hops: usize,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 10_000)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Fold shuffling and training seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ensemble output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Construct a quantization config from ensemble scores.
    BuildConfig {
        #[arg(long)]
        graph: PathBuf,
        /// Ensemble directory from `train`.
        #[arg(long)]
        ensemble: PathBuf,
        /// `op` scores each weight node alone; `block` enumerates catalog
        /// subgraphs jointly.
        #[arg(long, value_parser = clap::value_parser!(Level))]
        level: Level,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one config against the oracle.
    Eval {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, value_parser = parse_mode, default_value = "pure")]
        mode: TargetMode,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract the Pareto frontier of a corpus in (loss, bits).
    Pareto {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    init_thread_pool();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Diverged { .. } | Error::NonFinite(_) | Error::DegenerateTargets => 4,
            _ => 3,
        });
    }
}

/// `QS_THREADS` caps the worker pool used by corpus evaluation, member
/// training and scoring.
fn init_thread_pool() {
    if let Ok(v) = std::env::var("QS_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not apply QS_THREADS={n}: {e}");
                }
            }
            _ => eprintln!("warning: ignoring QS_THREADS={v} (want a positive integer)"),
        }
    }
}

fn run(command: Command) -> quantsense::Result<()> {
    let started = Instant::now();
    match command {
        Command::BuildGraph { family, blocks, width, seed, out } => {
            let model = quantsense::oracle::build_toy_model(
                family,
                &ToyParams { blocks, width },
                seed,
            )?;
            save_graph_doc(&out, &model)?;
            let mut manifest = RunManifest::new("build-graph");
            manifest
                .flag("family", family.as_str())
                .flag("blocks", blocks)
                .flag("width", width)
                .seed("weights", seed);
            manifest.output("graph", &out)?;
            finish(manifest, started, &manifest_path(&out))?;
            println!(
                "wrote {} ({} nodes, {} weight nodes, baseline loss {:.6})",
                out.display(),
                model.graph().len(),
                model.graph().weight_count(),
                model.baseline_loss()
            );
        }
        Command::Corpus { graph, n_configs, seed, lambda, mode, out } => {
            let model = load_model(&graph)?;
            let sample = SampleSpec { n_configs, seed };
            let (records, lambda_used) = generate_corpus(&model, &sample, lambda, mode)?;
            save_corpus(&out, &records)?;
            let mut manifest = RunManifest::new("corpus");
            manifest
                .flag("n-configs", n_configs)
                .flag("mode", mode.as_str())
                .flag("lambda", lambda_used)
                .seed("sampler", seed);
            manifest.input("graph", &graph)?;
            manifest.output("corpus", &out)?;
            finish(manifest, started, &manifest_path(&out))?;
            println!(
                "wrote {} ({} records, lambda {lambda_used})",
                out.display(),
                records.len()
            );
        }
        Command::Train { graph, corpus, rank_loss, hops, folds, epochs, batch, lr, seed, out } => {
            let model = load_model(&graph)?;
            let records = load_corpus(&corpus)?;
            let examples = persist::corpus_to_examples(&model, &records)?;
            let plan = make_folds(examples.len(), folds, seed)?;
            let sspec = SurrogateSpec { layers: hops, rank_loss, ..SurrogateSpec::default() };
            let tspec = TrainSpec {
                epochs,
                batch_size: batch,
                lr,
                seed,
                ..TrainSpec::default()
            };
            let ensemble = train_ensemble(
                model.graph(),
                model.catalog(),
                &examples,
                &sspec,
                &tspec,
                &plan,
            )?;
            save_ensemble(&out, &ensemble, &tspec, &plan)?;
            let mut manifest = RunManifest::new("train");
            manifest
                .flag("rank-loss", rank_loss.as_str())
                .flag("hops", hops)
                .flag("folds", folds)
                .flag("epochs", epochs)
                .flag("batch", batch)
                .flag("lr", lr)
                .seed("train", seed);
            manifest.input("graph", &graph)?;
            manifest.input("corpus", &corpus)?;
            manifest.output("ensemble", out.join(persist::ENSEMBLE_MANIFEST))?;
            finish(manifest, started, &out.join("run.json"))?;
            for member in ensemble.members() {
                let quality: Vec<String> = member
                    .metrics
                    .iter()
                    .map(|(hop, m)| format!("hop{hop} srcc {:.3} ndcg {:.3}", m.srcc, m.ndcg))
                    .collect();
                println!(
                    "fold {}: {} epochs, loss {:.6}, {}",
                    member.fold,
                    member.report.epochs_run,
                    member.report.final_loss,
                    quality.join(", ")
                );
            }
            println!("wrote {}", out.display());
        }
        Command::BuildConfig { graph, ensemble, level, out } => {
            let model = load_model(&graph)?;
            let (ensemble, _) = load_ensemble(&ensemble, model.graph(), model.catalog())?;
            let ctx = ScoreContext::new(model.graph(), model.store(), model.cache());
            let outcome = match level {
                Level::Op => ensemble.build_op_level(&ctx)?,
                Level::Block => ensemble.build_block_level(&ctx, model.catalog())?,
            };
            save_config(&out, &outcome.config)?;
            let scores_path = sibling(&out, "scores.csv");
            let summary_path = sibling(&out, "summary.csv");
            write_scores_csv(&scores_path, model.graph(), &outcome.scores)?;
            write_config_summary_csv(&summary_path, model.graph(), &outcome.config)?;
            let mut manifest = RunManifest::new("build-config");
            manifest.flag(
                "level",
                match level {
                    Level::Op => "op",
                    Level::Block => "block",
                },
            );
            manifest.input("graph", &graph)?;
            manifest.output("config", &out)?;
            manifest.output("scores", &scores_path)?;
            manifest.output("summary", &summary_path)?;
            finish(manifest, started, &manifest_path(&out))?;
            println!(
                "wrote {} ({} scored candidates, scores in {})",
                out.display(),
                outcome.scores.len(),
                scores_path.display()
            );
        }
        Command::Eval { graph, config, lambda, mode, out } => {
            let model = load_model(&graph)?;
            let cfg = load_config(&config)?;
            let record = evaluate_config(&model, &cfg, lambda, mode)?;
            save_eval(&out, &record)?;
            let mut manifest = RunManifest::new("eval");
            manifest.flag("lambda", lambda).flag("mode", mode.as_str());
            manifest.input("graph", &graph)?;
            manifest.input("config", &config)?;
            manifest.output("eval", &out)?;
            finish(manifest, started, &manifest_path(&out))?;
            println!(
                "loss {:.6}, avg bits {:.4} ({:.4} with overhead), y {:.6}",
                record.oracle_loss, record.avg_bits, record.avg_bits_overhead, record.y
            );
        }
        Command::Pareto { corpus, out } => {
            let records = load_corpus(&corpus)?;
            let frontier = pareto_frontier(&records);
            write_frontier_csv(&out, &records, &frontier)?;
            let mut manifest = RunManifest::new("pareto");
            manifest.input("corpus", &corpus)?;
            manifest.output("frontier", &out)?;
            finish(manifest, started, &manifest_path(&out))?;
            println!(
                "wrote {} ({} of {} records on the frontier)",
                out.display(),
                frontier.len(),
                records.len()
            );
        }
    }
    Ok(())
}

fn load_model(graph: &Path) -> quantsense::Result<ToyModel> {
    load_graph_doc(graph)?.build_model()
}

fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

/// `config.json` -> `config.<ext>`.
fn sibling(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn finish(mut manifest: RunManifest, started: Instant, path: &Path) -> quantsense::Result<()> {
    manifest.wall_ms = started.elapsed().as_millis() as u64;
    manifest.save(path)
}
