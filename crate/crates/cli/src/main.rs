//! Command line for training, evaluating, and inspecting runs.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metafew::episodes::dataset::Split;
use metafew::episodes::synthetic::{gaussian_blobs, GaussianBlobsParams};
use metafew::episodes::{dataset::write_dataset, EpisodeSpec};
use metafew::losses::DistanceKind;
use metafew::maml::MamlConfig;
use metafew::runner::{
    evaluate, export_weight_trajectory, train_run, write_artifacts, Algorithm, Checkpoint,
    EvalSetup, EvalStream, RunConfig,
};
use metafew::runner::train::load_data;
use metafew::runner::DataSource;

#[derive(Parser)]
#[command(
    name = "metafew",
    version,
    about = "Episodic few-shot training with optimized task weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config and write all run artifacts.
    Train(TrainArgs),
    /// Score a saved checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Generate a synthetic Gaussian-blob dataset directory.
    GenData(GenDataArgs),
    /// Rebuild weights.csv from a run directory's stored record.
    ExportWeights {
        /// Directory a train run wrote its artifacts into.
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Path to the run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for metrics, weights, checkpoint, and results.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlgorithmArg {
    Maml,
    Protonet,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Algorithm {
        match a {
            AlgorithmArg::Maml => Algorithm::Maml,
            AlgorithmArg::Protonet => Algorithm::Protonet,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DistanceArg {
    SquaredEuclidean,
    Euclidean,
}

impl From<DistanceArg> for DistanceKind {
    fn from(d: DistanceArg) -> DistanceKind {
        match d {
            DistanceArg::SquaredEuclidean => DistanceKind::SquaredEuclidean,
            DistanceArg::Euclidean => DistanceKind::Euclidean,
        }
    }
}

/// The checkpoint stores only the network, so the episode shape and the
/// scoring algorithm are given here.
#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or manifest path.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = AlgorithmArg::Protonet)]
    algorithm: AlgorithmArg,
    #[arg(long, default_value_t = 5)]
    n_way: usize,
    #[arg(long, default_value_t = 1)]
    n_shot: usize,
    #[arg(long, default_value_t = 15)]
    n_query: usize,
    /// Adaptation rate for maml scoring.
    #[arg(long, default_value_t = 0.01)]
    adapt_lr: f64,
    /// Adaptation step count for maml scoring.
    #[arg(long, default_value_t = 10)]
    inner_steps: usize,
    #[arg(long, value_enum, default_value_t = DistanceArg::SquaredEuclidean)]
    distance: DistanceArg,
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to write manifest.json and the class CSVs into.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 34)]
    num_classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 40)]
    examples_per_class: usize,
    /// Zero generates no coarse ids.
    #[arg(long, default_value_t = 0)]
    coarse_groups: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4.0)]
    radius: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Class counts as train,val,test; 0,0,0 splits roughly 60/20/20.
    #[arg(long, default_value = "0,0,0", value_parser = parse_splits)]
    splits: (usize, usize, usize),
}

fn parse_splits(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected train,val,test counts, got '{s}'"));
    }
    let mut n = [0usize; 3];
    for (slot, part) in n.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad split count '{part}': {e}"))?;
    }
    Ok((n[0], n[1], n[2]))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> metafew::Result<()> {
    match command {
        Command::Train(args) => {
            let text = fs::read_to_string(&args.config)
                .map_err(|e| metafew::Error::io(args.config.display().to_string(), e))?;
            let config: RunConfig =
                serde_json::from_str(&text).map_err(|e| metafew::Error::json("run config", e))?;
            let run = train_run::<f64>(&config)?;
            write_artifacts(&run, &args.out)?;
            let r = &run.record;
            println!(
                "best epoch {} (val acc {:.4}); test acc {:.4} +/- {:.4}",
                r.best_epoch, r.best_val_acc, r.test_mean_acc, r.test_ci95
            );
            println!("artifacts in {}", args.out.display());
            Ok(())
        }
        Command::Eval(args) => {
            let ckpt = Checkpoint::load(&args.checkpoint)?;
            let backbone = ckpt.to_backbone::<f64>()?;
            let dataset = load_data(&DataSource::Path(args.dataset))?;
            let spec = EpisodeSpec {
                n_way: args.n_way,
                n_shot: args.n_shot,
                n_query: args.n_query,
                tasks_per_episode: 1,
            };
            spec.validate()?;
            let maml = MamlConfig {
                adapt_lr: args.adapt_lr,
                inner_steps_eval: args.inner_steps,
                ..MamlConfig::default()
            };
            let report = evaluate(
                &backbone,
                &EvalSetup {
                    algorithm: args.algorithm.into(),
                    maml,
                    distance: args.distance.into(),
                    dataset: &dataset,
                    split: args.split,
                    spec,
                    episodes: args.episodes,
                    seed: args.seed,
                    stream: EvalStream::Test,
                },
            )?;
            println!(
                "{} episodes on {}: mean acc {:.4} +/- {:.4}",
                args.episodes, args.split, report.mean_acc, report.ci95
            );
            Ok(())
        }
        Command::GenData(args) => {
            let params = GaussianBlobsParams {
                num_classes: args.num_classes,
                dim: args.dim,
                examples_per_class: args.examples_per_class,
                coarse_groups: args.coarse_groups,
                seed: args.seed,
                radius: args.radius,
                sigma: args.sigma,
                splits: args.splits,
            };
            let dataset = gaussian_blobs(&params)?;
            let manifest = write_dataset(&dataset, &args.out)?;
            println!("wrote {}", manifest.display());
            Ok(())
        }
        Command::ExportWeights { run_dir } => {
            let path = export_weight_trajectory(&run_dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
