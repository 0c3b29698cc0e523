use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use multiverb_cli::commands::{
    cmd_build_labels, cmd_eval, cmd_retrieve, cmd_split, cmd_synth, cmd_train, EvalOptions,
    MetricKind, RetrieveMode, RetrieveOptions, TrainOptions,
};
use multiverb_cli::config::{resolve_out, ConfigOverrides, ExperimentConfig};
use multiverb_cli::pipeline::run_experiment;
use multiverb_core::LabelScheme;

/// Multi-verb action labels: build them from annotation votes, learn to
/// predict them from video features, and evaluate recognition and retrieval.
#[derive(Parser)]
#[command(name = "multiverb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic dataset from a JSON spec.
    Synth {
        /// Synthetic spec file (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for features.txt, votes.txt and vocab.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a vote file into per-scheme label files.
    BuildLabels {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        votes: PathBuf,
        /// Comma-separated schemes to build.
        #[arg(long = "scheme", value_delimiter = ',', default_values = ["SL", "ML", "SAML"])]
        schemes: Vec<LabelScheme>,
        #[arg(long, default_value_t = 0.5)]
        ml_threshold: f64,
        /// Drop vote verbs missing from the vocabulary instead of failing.
        #[arg(long)]
        ignore_unknown: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assign videos to stratified cross-validation folds.
    Split {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Fold file to write (one `video_id fold` pair per line).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model for one labelling scheme.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        scheme: LabelScheme,
        #[arg(long, default_value_t = 0.5)]
        ml_threshold: f64,
        #[arg(long)]
        ignore_unknown: bool,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Hidden layer sizes, e.g. `32` or `64,32`. Empty for a linear model.
        #[arg(long, value_delimiter = ',')]
        hidden_dims: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Fold file for holdout training.
        #[arg(long)]
        folds_file: Option<PathBuf>,
        /// Fold index to exclude from training.
        #[arg(long)]
        holdout: Option<usize>,
        /// Model file to write; a `.log` sibling records per-epoch loss.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a saved model: overlap accuracy, v2t mAP and t2v mAP.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        votes: PathBuf,
        /// Scheme the model was trained for.
        #[arg(long)]
        scheme: LabelScheme,
        #[arg(long, default_value_t = 0.5)]
        ml_threshold: f64,
        #[arg(long)]
        ignore_unknown: bool,
        /// Metrics to compute.
        #[arg(long = "metrics", value_delimiter = ',', default_values = ["overlap", "v2t", "t2v"])]
        metrics: Vec<MetricKind>,
        /// Relevance thresholds.
        #[arg(long = "alpha", value_delimiter = ',', default_values = ["0.5", "0.3"])]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        t2v_n_max: usize,
        #[arg(long, default_value_t = 0.5)]
        t2v_alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank verbs for a video, videos for a verb query, or videos for a
    /// query video.
    Retrieve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[command(flatten)]
        mode: RetrieveModeArgs,
        /// Keep only the closest N results.
        #[arg(long)]
        limit: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full cross-validated experiment: labels, folds, training and
    /// every evaluation metric, persisted with a reproducible manifest.
    Run {
        /// Flat key=value config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        votes: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Schemes to train, comma separated.
        #[arg(long = "scheme", value_delimiter = ',')]
        schemes: Vec<LabelScheme>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        hidden_dims: Vec<usize>,
        #[arg(long)]
        ml_threshold: Option<f64>,
        /// Relevance thresholds, comma separated.
        #[arg(long = "alpha", value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        t2v_n_max: Option<usize>,
        #[arg(long)]
        t2v_alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        ignore_unknown: bool,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct RetrieveTarget {
    /// Query video id (modes v2t and v2v).
    #[arg(long)]
    video: Option<String>,
    /// Comma-separated verb query (mode t2v), e.g. `turn-on,rotate`.
    #[arg(long)]
    query: Option<String>,
}

#[derive(Args)]
struct RetrieveModeArgs {
    /// Retrieval direction.
    #[arg(long, value_parser = ["v2t", "t2v", "v2v"])]
    mode: String,
    #[command(flatten)]
    target: RetrieveTarget,
    /// Exclude corpus videos with this dataset tag (mode v2v).
    #[arg(long)]
    exclude_tag: Option<String>,
    /// Exclude the query video's own dataset (mode v2v).
    #[arg(long)]
    cross_dataset: bool,
}

impl RetrieveModeArgs {
    fn into_mode(self) -> Result<RetrieveMode> {
        let video = self.target.video;
        let query = self.target.query;
        match self.mode.as_str() {
            "v2t" => Ok(RetrieveMode::V2t {
                video_id: video.ok_or_else(|| anyhow::anyhow!("mode v2t needs --video"))?,
            }),
            "t2v" => Ok(RetrieveMode::T2v {
                query: query.ok_or_else(|| anyhow::anyhow!("mode t2v needs --query"))?,
            }),
            "v2v" => Ok(RetrieveMode::V2v {
                video_id: video.ok_or_else(|| anyhow::anyhow!("mode v2v needs --video"))?,
                exclude_tag: self.exclude_tag,
                cross_dataset: self.cross_dataset,
            }),
            other => anyhow::bail!("unknown mode '{other}'"),
        }
    }
}

fn opt_vec<T>(values: Vec<T>) -> Option<Vec<T>> {
    if values.is_empty() {
        None
    } else {
        Some(values)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let out = resolve_out(out, "synth");
            let paths = cmd_synth(&spec, &out)?;
            println!("features: {}", paths.features.display());
            println!("votes: {}", paths.votes.display());
            println!("vocab: {}", paths.vocab.display());
        }
        Command::BuildLabels {
            vocab,
            votes,
            schemes,
            ml_threshold,
            ignore_unknown,
            out,
        } => {
            let out = resolve_out(out, "labels");
            let written =
                cmd_build_labels(&vocab, &votes, &schemes, ml_threshold, ignore_unknown, &out)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Split {
            features,
            folds,
            seed,
            out,
        } => {
            let out = resolve_out(out, "folds.txt");
            cmd_split(&features, folds, seed, &out)?;
            println!("{}", out.display());
        }
        Command::Train {
            features,
            vocab,
            votes,
            scheme,
            ml_threshold,
            ignore_unknown,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            hidden_dims,
            seed,
            folds_file,
            holdout,
            out,
        } => {
            let out = resolve_out(out, "model.txt");
            let written = cmd_train(&TrainOptions {
                features,
                vocab,
                votes,
                scheme,
                ml_threshold,
                ignore_unknown,
                epochs,
                batch_size,
                learning_rate,
                momentum,
                hidden_dims,
                seed,
                folds_file,
                holdout,
                out,
            })?;
            println!("{}", written.display());
        }
        Command::Eval {
            model,
            features,
            vocab,
            votes,
            scheme,
            ml_threshold,
            ignore_unknown,
            metrics,
            alphas,
            t2v_n_max,
            t2v_alpha,
            out,
        } => {
            let out = resolve_out(out, "eval");
            let aggregates = cmd_eval(&EvalOptions {
                model,
                features,
                vocab,
                votes,
                scheme,
                ml_threshold,
                ignore_unknown,
                metrics,
                alphas,
                t2v_n_max,
                t2v_alpha,
                out,
            })?;
            for (stem, aggregate) in aggregates {
                println!("{stem}\t{aggregate:.4}");
            }
        }
        Command::Retrieve {
            model,
            features,
            vocab,
            mode,
            limit,
            out,
        } => {
            cmd_retrieve(&RetrieveOptions {
                model,
                features,
                vocab,
                mode: mode.into_mode()?,
                limit,
                out,
            })?;
        }
        Command::Run {
            config,
            vocab,
            votes,
            features,
            out,
            schemes,
            epochs,
            batch_size,
            learning_rate,
            momentum,
            hidden_dims,
            ml_threshold,
            alphas,
            folds,
            t2v_n_max,
            t2v_alpha,
            seed,
            ignore_unknown,
        } => {
            let overrides = ConfigOverrides {
                vocab,
                votes,
                features,
                out,
                schemes: opt_vec(schemes),
                epochs,
                batch_size,
                learning_rate,
                momentum,
                hidden_dims: opt_vec(hidden_dims),
                ml_threshold,
                alphas: opt_vec(alphas),
                fold_count: folds,
                t2v_n_max,
                t2v_alpha,
                seed,
                ignore_unknown,
            };
            let resolved = ExperimentConfig::resolve(config.as_deref(), &overrides)?;
            let manifest = run_experiment(&resolved)?;
            println!(
                "run complete: {} folds, output in {}",
                manifest.folds.len(),
                resolved.out.display()
            );
            for cell in &manifest.aggregate.v2t_avg {
                println!("v2t avg mAP {}\t{:.4}", cell.phi, cell.map);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
