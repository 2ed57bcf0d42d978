use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use dhash_checker::history::{record_run, History, RecordParams};
use dhash_checker::linearize::{check_with_budget, Verdict, DEFAULT_BUDGET};
use dhash_checker::sched::{explore, scenarios, Exploration};
use dhash_checker::stress::{self, StressConfig, StressReport, Suite};

/// Correctness checks for the dhash table. Prints a JSON summary and exits
/// nonzero on any violation.
#[derive(Debug, Parser)]
#[command(name = "dhash-check", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Linearizability of recorded or stored histories.
    Check {
        #[command(subcommand)]
        what: CheckWhat,
    },
    /// Time-bounded stress suite under a continuously rebuilding thread.
    Stress {
        suite: Suite,
        #[arg(long, default_value_t = 10.0)]
        seconds: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Consecutive runs, seeded `seed`, `seed + 1`, ...
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long, default_value_t = 4)]
        threads: usize,
        #[arg(long)]
        no_rebuild: bool,
    },
    /// Every interleaving of small operations with a rebuild.
    Explore {
        /// Only the named scenario.
        #[arg(long)]
        scenario: Option<String>,
        /// Interleavings per scenario before giving up.
        #[arg(long, default_value_t = 5_000_000)]
        limit: u64,
    },
}

#[derive(Debug, Subcommand)]
enum CheckWhat {
    /// Record random small histories from a live table and check each, or
    /// check the given history files.
    Histories {
        #[arg(long, default_value_t = 10_000)]
        count: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        no_rebuild: bool,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u64,
        /// JSON history files to check instead of recording.
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Serialize)]
struct HistoryFailure {
    source: String,
    verdict: Verdict,
}

#[derive(Debug, Serialize)]
struct HistorySummary {
    command: &'static str,
    passed: bool,
    histories: u64,
    linearizable: u64,
    violations: u64,
    inconclusive: u64,
    rebuild_windows: u64,
    /// Histories in which two threads' operations overlap in time.
    concurrent_histories: u64,
    /// Operations that overlapped a rebuild.
    ops_during_rebuild: u64,
    failures: Vec<HistoryFailure>,
}

#[derive(Debug, Serialize)]
struct StressSummary {
    command: &'static str,
    suite: Suite,
    passed: bool,
    runs: Vec<StressReport>,
}

#[derive(Debug, Serialize)]
struct ExploreSummary {
    command: &'static str,
    passed: bool,
    scenarios: Vec<Exploration>,
}

fn print(v: &impl Serialize) -> Result<(), String> {
    println!("{}", serde_json::to_string(v).map_err(|e| e.to_string())?);
    Ok(())
}

fn check_histories(
    count: u64,
    seed: u64,
    rebuild: bool,
    budget: u64,
    files: &[PathBuf],
) -> Result<bool, String> {
    let mut s = HistorySummary {
        command: "check histories",
        passed: true,
        histories: 0,
        linearizable: 0,
        violations: 0,
        inconclusive: 0,
        rebuild_windows: 0,
        concurrent_histories: 0,
        ops_during_rebuild: 0,
        failures: Vec::new(),
    };
    let mut judge = |source: String, h: &History| -> Result<(), String> {
        let v = check_with_budget(h, budget).map_err(|e| format!("{source}: {e}"))?;
        s.histories += 1;
        s.rebuild_windows += h.rebuilds.len() as u64;
        let ops = h.operations().map_err(|e| format!("{source}: {e}"))?;
        let overlap = ops.iter().enumerate().any(|(i, a)| {
            ops[i + 1..]
                .iter()
                .any(|b| b.thread != a.thread && b.invoke <= a.response && a.invoke <= b.response)
        });
        s.concurrent_histories += u64::from(overlap);
        s.ops_during_rebuild += ops
            .iter()
            .filter(|o| {
                h.rebuilds
                    .iter()
                    .any(|w| w.start <= o.response && o.invoke <= w.end)
            })
            .count() as u64;
        match v {
            Verdict::Linearizable { .. } => s.linearizable += 1,
            Verdict::Violation { .. } => s.violations += 1,
            Verdict::Inconclusive { .. } => s.inconclusive += 1,
        }
        if !v.is_linearizable() && s.failures.len() < 10 {
            s.failures.push(HistoryFailure { source, verdict: v });
        }
        Ok(())
    };
    if files.is_empty() {
        for i in 0..count {
            let params = RecordParams::random(seed.wrapping_add(i), rebuild);
            let h = record_run(&params).map_err(|e| e.to_string())?;
            judge(format!("seed {}", params.seed), &h)?;
        }
    } else {
        for f in files {
            let file = File::open(f).map_err(|e| format!("{}: {e}", f.display()))?;
            let h: History = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| format!("{}: {e}", f.display()))?;
            judge(f.display().to_string(), &h)?;
        }
    }
    s.passed = s.violations == 0 && s.inconclusive == 0;
    print(&s)?;
    Ok(s.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Check {
            what:
                CheckWhat::Histories {
                    count,
                    seed,
                    no_rebuild,
                    budget,
                    files,
                },
        } => check_histories(count, seed, !no_rebuild, budget, &files),
        Command::Stress {
            suite,
            seconds,
            seed,
            runs,
            threads,
            no_rebuild,
        } => {
            let runs: Vec<StressReport> = (0..runs)
                .map(|i| {
                    let config = StressConfig {
                        threads,
                        rebuild: !no_rebuild,
                        ..StressConfig::new(seconds, seed.wrapping_add(i))
                    };
                    stress::run(suite, &config)
                })
                .collect();
            let passed = runs.iter().all(StressReport::passed);
            print(&StressSummary {
                command: "stress",
                suite,
                passed,
                runs,
            })
            .map(|()| passed)
        }
        Command::Explore { scenario, limit } => {
            let all = scenarios();
            let chosen: Vec<_> = all
                .iter()
                .filter(|s| scenario.as_deref().is_none_or(|n| n == s.name))
                .collect();
            if chosen.is_empty() {
                Err(format!(
                    "no scenario named {:?}",
                    scenario.unwrap_or_default()
                ))
            } else {
                let scenarios: Vec<Exploration> =
                    chosen.into_iter().map(|s| explore(s, limit)).collect();
                let passed = scenarios.iter().all(Exploration::passed);
                print(&ExploreSummary {
                    command: "explore",
                    passed,
                    scenarios,
                })
                .map(|()| passed)
            }
        }
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("dhash-check: {e}");
            ExitCode::from(2)
        }
    }
}
