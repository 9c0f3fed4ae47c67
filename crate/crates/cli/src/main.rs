use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparse_pi::kvcache::CacheStrategy;
use sparse_pi::scenario::{compare, run_scenario, sweep, ParsedReport, Scenario, SweepSpec};
use sparse_pi::transport::Bandwidth;
use sparse_pi::Error;

#[derive(Parser)]
#[command(name = "sparse-pi", version, about = "Sparsity-aware two-party private inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Link speed for the wall-time estimate: 100Mbps, 500Mbps, 1Gbps or 5Gbps.
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// KV-cache strategy: pr, mr or mr+prefetch.
    #[arg(long)]
    cache: Option<String>,
    /// Output directory (overrides the scenario's).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write report.csv and trace.csv.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-phase ratios of two reports (a / b).
    Compare { a: PathBuf, b: PathBuf },
    /// Re-run a scenario over a range of synthetic sparsities.
    Sweep {
        config: PathBuf,
        /// NAME=FROM:TO[:STEPS], NAME one of sparsity, mha_sparsity.
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load(config: &PathBuf, o: &Overrides) -> Result<Scenario, Error> {
    let mut s = Scenario::load(config)?;
    if let Some(b) = &o.bandwidth {
        s.transport.bandwidth = Bandwidth::preset(b)?.name.to_string();
    }
    if let Some(seed) = o.seed {
        s.seed = seed;
    }
    if let Some(c) = &o.cache {
        s.run.cache = CacheStrategy::ALL
            .into_iter()
            .find(|k| k.name() == c.as_str())
            .ok_or_else(|| Error::Config(format!("unknown cache strategy {c:?} (expected pr, mr or mr+prefetch)")))?;
    }
    if let Some(out) = &o.out {
        s.output.dir = out.clone();
    }
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { config, overrides } => {
            let s = load(&config, &overrides)?;
            let (report, rp, tp) = run_scenario(&s, None)?;
            println!("{}", report.summary());
            println!("wrote {} and {}", rp.display(), tp.display());
        }
        Command::Compare { a, b } => {
            let table = compare(&ParsedReport::load(&a)?, &ParsedReport::load(&b)?)?;
            print!("{table}");
        }
        Command::Sweep { config, axis, overrides } => {
            let s = load(&config, &overrides)?;
            let spec = SweepSpec::parse(&axis)?;
            let table = sweep(&s, &spec)?;
            std::fs::create_dir_all(&s.output.dir)?;
            let path = s.output.dir.join("sweep.csv");
            std::fs::write(&path, &table)?;
            print!("{table}");
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_protocol() { 3 } else { 2 })
        }
    }
}
