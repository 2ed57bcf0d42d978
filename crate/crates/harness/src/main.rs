use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;

use dhash_harness::config::{Mix, Pinning, RebuildMode, WorkloadConfig};
use dhash_harness::micro;
use dhash_harness::report::{emit_report, Format};
use dhash_harness::run::{measure_rebuild, run};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum RebuildArg {
    Off,
    Continuous,
}

/// Concurrent hash table throughput benchmark.
#[derive(Debug, Parser)]
#[command(name = "dhash-bench", version)]
struct Cli {
    /// Lookup, insert and delete percentages.
    #[arg(long, default_value = "90,5,5")]
    mix: Mix,
    /// Prefilled nodes per bucket.
    #[arg(long, default_value_t = 2.0)]
    load_factor: f64,
    /// Initial bucket count.
    #[arg(long, default_value_t = 1024)]
    buckets: usize,
    /// Keys are drawn from 0..KEYS.
    #[arg(long, default_value_t = 10_000_000)]
    keys: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 10.0)]
    seconds: f64,
    #[arg(long, value_enum, default_value = "off")]
    rebuild: RebuildArg,
    /// Bucket count the continuous rebuild alternates with. Defaults to twice
    /// the initial count.
    #[arg(long)]
    alt_buckets: Option<usize>,
    /// Keep the initial hash function across continuous rebuilds.
    #[arg(long)]
    same_hash: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "none")]
    pin: Pinning,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "text")]
    format: Format,
    /// Instead of a throughput run, time rebuilds at these populations
    /// (comma separated) and print JSON.
    #[arg(long, value_delimiter = ',')]
    measure_rebuild: Vec<u64>,
    /// Rebuilds timed per population.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Instead of a throughput run, time the critical-section fast path over
    /// this many iterations and print JSON.
    #[arg(long)]
    micro_reclaim: Option<u64>,
}

impl Cli {
    fn config(&self) -> WorkloadConfig {
        WorkloadConfig {
            mix: self.mix,
            load_factor: self.load_factor,
            buckets: self.buckets,
            key_range: self.keys,
            threads: self.threads,
            duration: Duration::from_secs_f64(self.seconds.max(0.0)),
            rebuild: match self.rebuild {
                RebuildArg::Off => RebuildMode::Off,
                RebuildArg::Continuous => RebuildMode::Continuous {
                    alt_buckets: self.alt_buckets.unwrap_or(2 * self.buckets),
                    same_hash: self.same_hash,
                },
            },
            seed: self.seed,
            pinning: self.pin,
        }
    }
}

fn output(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = cli.config();
    let result = (|| -> Result<(), Box<dyn std::error::Error>> {
        if let Some(iters) = cli.micro_reclaim {
            let r = micro::reclaim_fast_path(iters, 100);
            let mut out = output(&cli.out)?;
            serde_json::to_writer(&mut out, &r)?;
            writeln!(out)?;
            return Ok(());
        }
        if !cli.measure_rebuild.is_empty() {
            let samples = measure_rebuild(&config, &cli.measure_rebuild, cli.reps)?;
            let mut out = output(&cli.out)?;
            serde_json::to_writer(&mut out, &samples)?;
            writeln!(out)?;
            return Ok(());
        }
        if cli.pin == Pinning::PerformanceFirst && dhash_harness::pin::cpu_order().is_empty() {
            eprintln!("warning: pinning unsupported here, running unpinned");
        }
        let report = run(&config)?;
        if cli.pin == Pinning::PerformanceFirst && !report.host.pinned {
            eprintln!("warning: some workers could not be pinned");
        }
        let mut out = output(&cli.out)?;
        emit_report(&report, cli.format, &mut out)?;
        out.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dhash-bench: {e}");
            ExitCode::FAILURE
        }
    }
}
