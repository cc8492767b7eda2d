use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qat_harness::ablate::{cmd_ablate, Grid};
use qat_harness::checks::{cmd_gradcheck, SuiteOptions};
use qat_harness::curves::cmd_curves;
use qat_harness::export::cmd_export;
use qat_harness::train::cmd_train;

/// Sigmoid straight-through rounding and soft clamping for quantization-aware
/// training: curves, gradient checks, toy runs and ablations.
#[derive(Parser)]
#[command(name = "qat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write estimator and clamp curves as CSV.
    Curves {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient check suite.
    Gradcheck {
        /// Directory for gradcheck.csv.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every (clamp, temperature) cell of a grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Temperatures, e.g. `T=0,5,10,100`; 0 selects the plain STE.
        #[arg(long, default_value = "T=0,5,10,100")]
        grid: String,
        /// Clamp modes, e.g. `hard,soft`.
        #[arg(long, default_value = "hard,soft")]
        clamp: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the integer codes of a checkpoint's quantized layers.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Curves { out } => {
            for p in cmd_curves(&out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Gradcheck { out } => {
            let (results, path) = cmd_gradcheck(&out, &SuiteOptions::default())?;
            for r in &results {
                let c = &r.comparison;
                let verdict = if r.passed() { "ok  " } else { "FAIL" };
                println!(
                    "{verdict} {:<28} points {:>6}  failures {:>4}  max rel {:.3e}  max abs {:.3e}",
                    r.name, c.points, c.failures, c.max_rel, c.max_abs
                );
            }
            println!("wrote {}", path.display());
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", results.len());
                return Ok(false);
            }
        }
        Command::Train { config, out } => {
            let (o, ckpt) = cmd_train(&config, &out)?;
            println!(
                "steps {}  initial loss {:.4}  final train loss {:.4}",
                o.steps_run, o.initial_loss, o.final_train_loss
            );
            println!("eval loss {:.4}  eval perplexity {:.4}", o.eval_loss, o.eval_ppl);
            if o.nan {
                println!("training stopped on a non-finite loss or gradient");
            }
            println!("wrote {}", ckpt.display());
        }
        Command::Ablate { config, grid, clamp, out } => {
            let grid = Grid::parse(&grid, &clamp)?;
            let report = cmd_ablate(&config, &grid, &out)?;
            print!("{}", report.render());
            println!("wrote {}", out.display());
        }
        Command::Export { checkpoint, out } => {
            let s = cmd_export(&checkpoint, &out)?;
            for (name, bits, scale, n) in &s.layers {
                println!("{name:<10} {bits} bits  scale {scale:.6e}  {n} codes");
            }
            println!("wrote {} ({} bytes)", out.display(), s.file_bytes);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
