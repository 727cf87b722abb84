//! `fibecfed`: run federated fine-tuning experiments and compare their metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fibecfed_core::config::{load_config, Mode};
use fibecfed_core::experiment::{compare_runs, run_experiment, METRICS_FILE, SUMMARY_FILE};
use fibecfed_core::Error;

#[derive(Parser)]
#[command(name = "fibecfed", version, about = "Federated LoRA fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Overrides the mode in the config.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Compare two metrics files: rounds to each target accuracy and final accuracy.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Comma-separated target accuracies in [0, 1].
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.6, 0.7, 0.8])]
        targets: Vec<f64>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, mode } => load_config(&config).and_then(|mut cfg| {
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(mode) = mode {
                cfg.mode = mode;
            }
            let res = run_experiment(&cfg, &out)?;
            let s = &res.summary;
            println!("mode {} seed {}: {} rounds, GAL layers {:?}", s.mode, s.seed, s.rounds, s.gal.gal_layers);
            if let Some(acc) = s.final_accuracy {
                println!("final weighted test accuracy {acc:.4}");
            }
            println!("wrote {} and {}", out.join(METRICS_FILE).display(), out.join(SUMMARY_FILE).display());
            Ok(())
        }),
        Command::Compare { a, b, targets } => (|| {
            let read = |p: &PathBuf| {
                std::fs::read_to_string(p).map_err(|e| Error::Csv(format!("cannot read {}: {e}", p.display())))
            };
            let cmp = compare_runs(&read(&a)?, &read(&b)?, &targets)?;
            print!("{}", cmp.render());
            Ok(())
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
