use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use regimenas_cli::commands::{self, Format};
use regimenas_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "regimenas", version, about = "Regime-aware architecture search for financial time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Gru,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic regime-switching OHLCV series and its hidden regime path.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV; the regime path goes next to it as `<stem>.regimes.csv`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run (or resume) the architecture search into a run directory.
    Search {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the plain GRU comparator.
    TrainBaseline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "gru")]
        kind: BaselineKind,
    },
    /// Retrain the ablation variants of a finished search.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Render the report tables of a run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { config, out, seed } => {
            for p in commands::generate_data(&config, &out, seed)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Search { data, config, out, seed } => {
            let s = commands::search(&data, config.as_deref(), &out, seed)?;
            println!(
                "search finished: {} evaluations ({} reused), best score {}",
                s.evaluations,
                s.reused,
                s.best.map_or("n/a".into(), |b| format!("{b:.6}"))
            );
        }
        Command::TrainBaseline { data, config, out, seed, kind } => {
            let BaselineKind::Gru = kind;
            let m = commands::train_baseline_cmd(data.as_deref(), config.as_deref(), &out, seed)?;
            println!("baseline test MAE {:.6} RMSE {:.6} R² {:.6}", m.mae, m.rmse, m.r2);
        }
        Command::Ablate { out, data } => {
            for r in commands::ablate(&out, data.as_deref())? {
                let mae = r.metrics.as_ref().map_or("n/a".into(), |m| format!("{:.6}", m.mae));
                println!("{:<24} MAE {mae}", r.label);
            }
        }
        Command::Report { out, format } => {
            let (text, missing) = commands::report(&out, format)?;
            for m in missing {
                eprintln!("note: {m} not found; its table is empty");
            }
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
