use clap::{Args, Parser, Subcommand};
use divlearn::harness::{self, load_config, ExperimentKind, HarnessError, RunOutcome};
use std::process::ExitCode;

/// Multitask representation-learning experiment harness.
#[derive(Parser)]
#[command(name = "divlearn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (key = value lines).
    #[arg(long)]
    config: String,
    /// Override the config's output path.
    #[arg(long)]
    out: Option<String>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for trial execution (output order is unaffected).
    #[arg(long)]
    threads: Option<usize>,
    /// Emit the first record's per-iteration risk trace next to the output.
    #[arg(long)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Transfer-vs-isolation risk sweep over the (t, n, m) grid.
    Sweep(RunArgs),
    /// Diversity certificate audit over random candidate representations.
    Diversity(RunArgs),
    /// Gaussian/Rademacher complexity audit against closed-form bounds.
    Complexity(RunArgs),
    /// Burer-Monteiro recovery sweep with subspace-angle diagnostics.
    Landscape(RunArgs),
    /// Grouped medians and log-log slope fit of an existing CSV.
    Summarize(RunArgs),
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<RunOutcome, HarnessError> {
    let mut cfg = load_config(&args.config)?;
    if cfg.kind != kind {
        return Err(HarnessError::KindMismatch {
            expected: kind.as_str().to_string(),
            got: cfg.kind.as_str().to_string(),
        });
    }
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads.max(1);
    }
    if args.trace {
        cfg.trace = true;
    }
    match kind {
        ExperimentKind::Sweep => harness::run_sweep(&cfg),
        ExperimentKind::Diversity => harness::run_diversity_audit(&cfg),
        ExperimentKind::Complexity => harness::run_complexity_audit(&cfg),
        ExperimentKind::Landscape => harness::run_landscape(&cfg),
        ExperimentKind::Summarize => {
            let table = harness::summarize(&cfg.csv, &cfg.group, &cfg.response)?;
            let rendered = table.render();
            match &args.out {
                Some(path) => std::fs::write(path, &rendered)
                    .map_err(|e| HarnessError::Io(format!("{path}: {e}")))?,
                None => print!("{rendered}"),
            }
            Ok(RunOutcome {
                out_path: args.out.clone().unwrap_or_default(),
                rows: table.groups.len(),
                error_rows: 0,
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
        Command::Diversity(a) => (ExperimentKind::Diversity, a),
        Command::Complexity(a) => (ExperimentKind::Complexity, a),
        Command::Landscape(a) => (ExperimentKind::Landscape, a),
        Command::Summarize(a) => (ExperimentKind::Summarize, a),
    };
    match run(kind, args) {
        Ok(outcome) => {
            if kind != ExperimentKind::Summarize {
                eprintln!(
                    "wrote {} rows to {} ({} with errors)",
                    outcome.rows, outcome.out_path, outcome.error_rows
                );
            }
            if outcome.error_rows > 0 {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
