use clap::{Parser, Subcommand};
use drbc_cli::{run_file, Experiment, Overrides};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "drbc", version, about = "Distributionally robust Bayesian control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV and JSON reports
    Run {
        experiment: Experiment,
        /// flat TOML config; every key is optional
        #[arg(long)]
        config: PathBuf,
        /// master seed, overriding the config
        #[arg(long)]
        seed: Option<u64>,
        /// output directory, overriding the config (default `results`)
        #[arg(long)]
        out: Option<PathBuf>,
        /// full-scale defaults for keys the config leaves unset
        #[arg(long)]
        full: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { experiment, config, seed, out, full } = cli.command;
    match run_file(experiment, &config, &Overrides { seed, out, full }) {
        Ok((report, csv, json)) => {
            for p in &report.properties {
                println!("{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
            }
            println!("wrote {} and {}", csv.display(), json.display());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
