use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mags::certify::{run_all, CertifyOptions};
use mags::harness::{eval_all, plotdata, train_all, Experiment};
use mags::metrics::Combiner;

#[derive(Parser)]
#[command(name = "mags", version, about = "Fault-tolerant decentralized split-network inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds, e.g. `1,2,5` or `1-16`, overriding the config.
    #[arg(long)]
    seeds: Option<String>,
    /// Worker threads (default: all cores).
    #[arg(long, env = "MAGS_WORKERS")]
    workers: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CombinerArg {
    Geometric,
    Arithmetic,
}

#[derive(Subcommand)]
enum Command {
    /// Train one checkpoint per (method, seed).
    Train(RunArgs),
    /// Evaluate checkpoints over the fault sweep and write run CSVs.
    Eval(RunArgs),
    /// Run the numerical certificate suite.
    Props {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "geometric", hide = true)]
        combiner: CombinerArg,
    },
    /// Turn run CSVs into per-figure and per-table CSVs.
    Plotdata {
        /// Run CSVs written by `eval`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "plotdata")]
        out: PathBuf,
    },
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse()?, b.parse()?);
                if a > b {
                    bail!("empty seed range {part}");
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().with_context(|| format!("bad seed {part:?}"))?),
        }
    }
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn experiment(args: &RunArgs) -> Result<Experiment> {
    let mut exp = Experiment::load(&args.config)?;
    if let Some(out) = &args.out {
        exp.config.out_dir = out.clone();
    }
    if let Some(s) = &args.seeds {
        exp.config.seeds = parse_seeds(s)?;
    }
    Ok(exp)
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Train(args) => {
            let exp = experiment(&args)?;
            let paths = train_all(&exp, args.workers)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Eval(args) => {
            let exp = experiment(&args)?;
            let records = eval_all(&exp, args.workers)?;
            println!("{} rows written to {}", records.len(), exp.config.out_dir.join("runs.csv").display());
        }
        Command::Props { seed, combiner } => {
            let combiner = match combiner {
                CombinerArg::Geometric => Combiner::Geometric,
                CombinerArg::Arithmetic => Combiner::Arithmetic,
            };
            let report = run_all(&CertifyOptions { seed, combiner, ..CertifyOptions::default() })?;
            report.write(std::io::stdout().lock())?;
            if !report.all_pass() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Plotdata { runs, out } => {
            for p in plotdata(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
