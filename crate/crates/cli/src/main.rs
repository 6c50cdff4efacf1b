//! `fastshap`: train a classifier, its surrogates and an amortized Shapley
//! explainer, then explain instances and benchmark the explainer.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fastshap_core::data::SyntheticSpec;
use fastshap_core::nn::TrainConfig;
use fastshap_core::pipeline::ValueFunctionKind;

use crate::artifacts::Kind;
use crate::commands::{Context, InstanceSource, SyntheticArgs};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "fastshap",
    version,
    about = "Amortized Shapley value explanations for tabular classifiers"
)]
struct Cli {
    /// Run configuration file.
    #[arg(long, short, global = true, default_value = "fastshap.toml")]
    config: PathBuf,

    /// Artifact root; overrides the config file and FASTSHAP_OUTPUT.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainFlags {
    fn apply(&self, train: &mut TrainConfig) {
        if let Some(e) = self.epochs {
            train.max_epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            train.batch_size = b;
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum RemovalArg {
    Surrogate,
    Baseline,
    Marginal,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic dataset and a ready-to-use config into --output-dir (default: current directory).
    Generate {
        #[arg(long, default_value_t = 5000)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        features: usize,
        #[arg(long, default_value_t = 1)]
        irrelevant_features: usize,
    },
    /// Train the classifier to be explained.
    TrainModel(#[command(flatten)] TrainFlags),
    /// Train the masked-input surrogate used to remove features.
    TrainSurrogate(#[command(flatten)] TrainFlags),
    /// Train the separate masked-input model that scores removal curves.
    TrainEvalModel(#[command(flatten)] TrainFlags),
    /// Train the amortized explainer.
    TrainFastshap {
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        samples_per_input: Option<usize>,
        /// How held-out features are removed.
        #[arg(long, value_enum)]
        value_function: Option<RemovalArg>,
        /// Background rows for the marginal value function.
        #[arg(long, default_value_t = 100)]
        background_size: usize,
    },
    /// Explain dataset rows or instances from a file.
    Explain {
        /// Comma-separated dataset row indices.
        #[arg(
            long,
            value_delimiter = ',',
            required_unless_present = "instances",
            conflicts_with = "instances"
        )]
        index: Vec<usize>,
        /// Delimited file of raw instances with the dataset's feature columns.
        #[arg(long)]
        instances: Option<PathBuf>,
        /// Class to explain (default: the model's prediction).
        #[arg(long)]
        class: Option<usize>,
    },
    /// Compare the explainer against sampling estimators at fixed budgets.
    Benchmark {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Inclusion and exclusion curves of the explainer's rankings.
    Auc {
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long)]
        random_rankings: Option<usize>,
    },
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::Generate { .. } => {}
        Command::TrainModel(f) => f.apply(&mut config.model.train),
        Command::TrainSurrogate(f) => f.apply(&mut config.surrogate.train),
        Command::TrainEvalModel(f) => f.apply(&mut config.eval_model.train),
        Command::TrainFastshap {
            train,
            samples_per_input,
            value_function,
            background_size,
        } => {
            let fs = &mut config.explainer.fastshap;
            train.apply(&mut fs.train);
            if let Some(m) = samples_per_input {
                fs.samples_per_input = *m;
            }
            if let Some(v) = value_function {
                config.explainer.value_function = match v {
                    RemovalArg::Surrogate => ValueFunctionKind::Surrogate,
                    RemovalArg::Baseline => ValueFunctionKind::Baseline,
                    RemovalArg::Marginal => ValueFunctionKind::Marginal {
                        background_size: *background_size,
                    },
                };
            }
        }
        Command::Explain { .. } => {}
        Command::Benchmark { instances, budgets } => {
            if let Some(n) = instances {
                config.benchmark.instances = *n;
            }
            if let Some(b) = budgets {
                config.benchmark.budgets = b.clone();
            }
        }
        Command::Auc {
            instances,
            grid_points,
            random_rankings,
        } => {
            let a = &mut config.auc;
            a.instances = instances.unwrap_or(a.instances);
            a.grid_points = grid_points.unwrap_or(a.grid_points);
            a.random_rankings = random_rankings.unwrap_or(a.random_rankings);
        }
    }
    config.validate()?;
    let root = config.output_root(cli.output_dir.as_deref());
    Ok(Context { config, root })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("cannot start {n} workers: {e}")))?;
    }
    if let Command::Generate {
        instances,
        features,
        irrelevant_features,
    } = cli.command
    {
        return commands::generate(&SyntheticArgs {
            dir: cli.output_dir.unwrap_or_else(|| PathBuf::from(".")),
            spec: SyntheticSpec {
                instances,
                features,
                irrelevant_features,
                seed: cli.seed.unwrap_or(0),
            },
        });
    }
    let ctx = context(&cli)?;
    match &cli.command {
        Command::Generate { .. } => unreachable!("handled above"),
        Command::TrainModel(_) => commands::train_model(&ctx),
        Command::TrainSurrogate(_) => commands::train_masked_surrogate(&ctx, Kind::Surrogate),
        Command::TrainEvalModel(_) => commands::train_masked_surrogate(&ctx, Kind::EvalModel),
        Command::TrainFastshap { .. } => commands::train_explainer(&ctx),
        Command::Explain {
            index,
            instances,
            class,
        } => {
            let source = match instances {
                Some(path) => InstanceSource::File(path.clone()),
                None => InstanceSource::Indices(index.clone()),
            };
            commands::explain_instances(&ctx, &source, *class)
        }
        Command::Benchmark { .. } => commands::benchmark(&ctx),
        Command::Auc { .. } => commands::auc(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version go to stdout and are not failures.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
