use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steinrank::{Method, Metric};
use steinrank_cli::{commands, CommonArgs};

#[derive(Parser)]
#[command(name = "steinrank", version, about = "Rank training samples by unlearning difficulty and run unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated metrics, e.g. `emsksd,pc`.
    #[arg(long, value_delimiter = ',')]
    metrics: Option<Vec<Metric>>,
    /// Comma-separated unlearning methods, e.g. `grad_ascent,retrain`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        CommonArgs {
            config: c.config,
            out: c.out,
            seed: c.seed,
            metrics: c.metrics,
            methods: c.methods,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the base model for each seed.
    Train(Common),
    /// Score training samples with a trained model.
    Score {
        #[command(flatten)]
        common: Common,
        /// Also write the Stein kernel matrix.
        #[arg(long)]
        kernel: bool,
    },
    /// Select the easiest and hardest samples from a rankings file.
    Rank(Common),
    /// Unlearn given targets with each configured method.
    Unlearn {
        #[command(flatten)]
        common: Common,
        /// Comma-separated training sample ids.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<usize>,
        /// Also forget the k samples most Stein-similar to each target.
        #[arg(long, default_value_t = 0)]
        expand: usize,
    },
    /// Evaluate models produced by `unlearn`.
    Evaluate(Common),
    /// Run the full train-score-select-unlearn-evaluate protocol.
    Experiment(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c.into()),
        Command::Score { common, kernel } => commands::score(&common.into(), kernel),
        Command::Rank(c) => commands::rank(&c.into()),
        Command::Unlearn { common, targets, expand } => commands::unlearn(&common.into(), &targets, expand),
        Command::Evaluate(c) => commands::evaluate(&c.into()),
        Command::Experiment(c) => commands::experiment(&c.into()),
    };
    match result {
        Ok(outcome) => {
            if outcome.exit_code() != 0 {
                eprintln!("some runs failed; see the status column of the report");
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
