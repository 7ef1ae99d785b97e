use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ganlab::cli::{self, CliError};
use ganlab::gradcheck::DEFAULT_CASES;

#[derive(Parser)]
#[command(
    name = "ganlab",
    version,
    about = "Adversarial and diffusion training on toy distributions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and write metrics.csv, samples.csv, config.toml and runlog.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "on")]
        svg: Toggle,
    },
    /// Summarize a finished run (a runlog.json or the directory holding it).
    Eval {
        #[arg(long, alias = "run")]
        runlog: PathBuf,
    },
    /// Run every cell of a sweep file and write index.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long, value_enum, default_value = "off")]
        svg: Toggle,
    },
    /// Finite-difference check of every primitive and loss; exits nonzero on failure.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a config and a diffusion run on the same data and seeds; write compare.csv.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds 0..N, unless --seed gives a single one.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            svg,
        } => {
            let log = cli::cmd_train(&config, &out, seed, matches!(svg, Toggle::On))?;
            print!("{}", log.metrics_csv());
            if log.diverged() {
                eprintln!("run diverged: {:?}", log.status);
            }
        }
        Command::Eval { runlog } => print!("{}", cli::cmd_eval(&runlog)?.render()),
        Command::Sweep {
            config,
            out,
            parallel,
            svg,
        } => {
            let runs = cli::cmd_sweep(&config, &out, parallel, matches!(svg, Toggle::On))?;
            let diverged = runs.iter().filter(|(_, l)| l.diverged()).count();
            println!(
                "{} runs, {diverged} diverged; index at {}",
                runs.len(),
                out.join("index.csv").display()
            );
        }
        Command::Gradcheck { cases, seed } => {
            let results = cli::cmd_gradcheck(cases, seed)?;
            print!("{}", cli::gradcheck_report(&results));
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", results.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("all {} checks passed", results.len());
        }
        Command::Compare {
            config,
            out,
            seeds,
            seed,
            parallel,
        } => {
            let cfg = cli::parse_config(&cli::read_text(&config)?)?;
            let seeds: Vec<u64> = match seed {
                Some(s) => vec![s],
                None => (0..seeds).collect(),
            };
            let rows = cli::cmd_compare(&cfg, &seeds, &out, parallel)?;
            print!("{}", cli::compare_csv(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
