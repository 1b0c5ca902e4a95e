use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tvbi::prior::MrfParams;
use tvbi_cli::commands::{cmd_bench, cmd_eval, cmd_export, cmd_prune, cmd_sample_prior, cmd_train};
use tvbi_cli::config::{Overrides, RunConfig};
use tvbi_cli::CliError;

/// Structured pruning of dense networks with a clustered-support prior.
#[derive(Debug, Parser)]
#[command(name = "tvbi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the dense baseline and save its weights
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Prune trained weights; writes pruned.tvbi, trace.csv, masks/ and metrics.json
    Prune {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Single variational pass with a fixed support prior
        #[arg(long)]
        plain: bool,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Evaluate weights (optionally with block-format layers) on the test split
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        /// One .tvbs file per layer, in order
        #[arg(long, num_args = 1..)]
        tvbs: Vec<PathBuf>,
        #[command(flatten)]
        ov: Overrides,
    },
    /// Store each layer in the block-sparse .tvbs format
    Export {
        #[arg(long)]
        weights: PathBuf,
        /// Directory with layer<l>.pgm masks; defaults to the nonzero pattern
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        min_side: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Time dense, COO and block multiplies of a .tvbs matrix
    Bench {
        #[arg(long)]
        tvbs: PathBuf,
        /// Columns of the right-hand operand
        #[arg(long, default_value_t = 64)]
        cols: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a support matrix from the MRF prior as a PGM image
    SamplePrior {
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        sweeps: usize,
        #[arg(long)]
        p01_row: Option<f64>,
        #[arg(long)]
        p10_row: Option<f64>,
        #[arg(long)]
        p01_col: Option<f64>,
        #[arg(long)]
        p10_col: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn write_out(path: &std::path::Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Core(e.into()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, ov } => {
            let cfg = RunConfig::load(config.as_deref(), &ov)?;
            print_json(&cmd_train(&cfg, &out)?);
        }
        Command::Prune { config, weights, out_dir, plain, ov } => {
            let cfg = RunConfig::load(config.as_deref(), &ov)?;
            print_json(&cmd_prune(&cfg, &weights, &out_dir, plain)?);
        }
        Command::Eval { config, weights, tvbs, ov } => {
            let cfg = RunConfig::load(config.as_deref(), &ov)?;
            print_json(&cmd_eval(&cfg, &weights, &tvbs)?);
        }
        Command::Export { weights, masks, min_side, out_dir } => {
            if min_side == 0 {
                return Err(CliError::Config("min_side must be at least 1".into()));
            }
            print_json(&cmd_export(&weights, masks.as_deref(), min_side, &out_dir)?);
        }
        Command::Bench { tvbs, cols, repeats, seed, out } => {
            let csv = cmd_bench(&tvbs, cols, repeats, seed)?;
            match out {
                Some(p) => write_out(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::SamplePrior { rows, cols, seed, sweeps, p01_row, p10_row, p01_col, p10_col, out } => {
            let d = MrfParams::default();
            let params = MrfParams::new(
                p01_row.unwrap_or(d.p01_row),
                p10_row.unwrap_or(d.p10_row),
                p01_col.unwrap_or(d.p01_col),
                p10_col.unwrap_or(d.p10_col),
            )?;
            write_out(&out, &cmd_sample_prior(&params, (rows, cols), seed, sweeps)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
