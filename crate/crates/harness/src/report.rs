//! Throughput reports and their CSV, JSON and text renderings.
//!
//! CSV layout: one header, one `summary` row, then one `thread` row per
//! worker. Columns, in order:
//!
//! `row, thread, cpu, lookups, lookup_hits, inserts, insert_ok, deletes,
//! delete_ok, total_ops, ops_per_sec, elapsed_s, mix, load_factor, buckets,
//! key_range, threads, duration_ns, rebuild, alt_buckets, same_hash, seed,
//! pin, pinned, cpus, os, arch, generator, prefilled, final_census,
//! rebuild_count, rebuild_mean_s, rebuild_std_s, rebuild_seconds`
//!
//! Thread rows fill only the columns up to `ops_per_sec`; `rebuild_seconds`
//! is a `;`-separated list.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Mix, Pinning, RebuildMode, WorkloadConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub lookups: u64,
    pub lookup_hits: u64,
    pub inserts: u64,
    pub insert_ok: u64,
    pub deletes: u64,
    pub delete_ok: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.lookups + self.inserts + self.deletes
    }

    pub fn add(&mut self, o: &OpCounts) {
        self.lookups += o.lookups;
        self.lookup_hits += o.lookup_hits;
        self.inserts += o.inserts;
        self.insert_ok += o.insert_ok;
        self.deletes += o.deletes;
        self.delete_ok += o.delete_ok;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadReport {
    pub thread: usize,
    pub cpu: Option<usize>,
    pub counts: OpCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub cpus: usize,
    pub os: String,
    pub arch: String,
    /// Whether every worker was bound to a CPU.
    pub pinned: bool,
    pub generator: String,
}

impl HostInfo {
    pub fn current(pinned: bool) -> HostInfo {
        HostInfo {
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            pinned,
            generator: crate::workload::GENERATOR.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub config: WorkloadConfig,
    pub host: HostInfo,
    pub elapsed_secs: f64,
    pub totals: OpCounts,
    pub threads: Vec<ThreadReport>,
    pub rebuild_seconds: Vec<f64>,
    pub prefilled: u64,
    pub final_census: u64,
}

impl ThroughputReport {
    pub fn ops_per_sec(&self) -> f64 {
        self.totals.total() as f64 / self.elapsed_secs
    }

    pub fn thread_ops_per_sec(&self, t: &ThreadReport) -> f64 {
        t.counts.total() as f64 / self.elapsed_secs
    }

    pub fn rebuild_mean(&self) -> f64 {
        mean(&self.rebuild_seconds)
    }

    pub fn rebuild_std(&self) -> f64 {
        std_dev(&self.rebuild_seconds)
    }

    /// Totals equal the per-thread sums.
    pub fn is_conserved(&self) -> bool {
        let mut sum = OpCounts::default();
        for t in &self.threads {
            sum.add(&t.counts);
        }
        sum == self.totals
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Format, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "text" => Ok(Format::Text),
            _ => Err(format!("unknown format {s:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed report: {0}")]
    Malformed(String),
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Row {
    row: String,
    thread: Option<usize>,
    cpu: Option<usize>,
    lookups: u64,
    lookup_hits: u64,
    inserts: u64,
    insert_ok: u64,
    deletes: u64,
    delete_ok: u64,
    total_ops: u64,
    ops_per_sec: f64,
    elapsed_s: Option<f64>,
    mix: Option<String>,
    load_factor: Option<f64>,
    buckets: Option<usize>,
    key_range: Option<u64>,
    threads: Option<usize>,
    duration_ns: Option<u64>,
    rebuild: Option<String>,
    alt_buckets: Option<usize>,
    same_hash: Option<bool>,
    seed: Option<u64>,
    pin: Option<String>,
    pinned: Option<bool>,
    cpus: Option<usize>,
    os: Option<String>,
    arch: Option<String>,
    generator: Option<String>,
    prefilled: Option<u64>,
    final_census: Option<u64>,
    rebuild_count: Option<usize>,
    rebuild_mean_s: Option<f64>,
    rebuild_std_s: Option<f64>,
    rebuild_seconds: Option<String>,
}

fn counts_row(kind: &str, counts: &OpCounts, ops_per_sec: f64) -> Row {
    Row {
        row: kind.into(),
        lookups: counts.lookups,
        lookup_hits: counts.lookup_hits,
        inserts: counts.inserts,
        insert_ok: counts.insert_ok,
        deletes: counts.deletes,
        delete_ok: counts.delete_ok,
        total_ops: counts.total(),
        ops_per_sec,
        ..Row::default()
    }
}

fn row_counts(r: &Row) -> OpCounts {
    OpCounts {
        lookups: r.lookups,
        lookup_hits: r.lookup_hits,
        inserts: r.inserts,
        insert_ok: r.insert_ok,
        deletes: r.deletes,
        delete_ok: r.delete_ok,
    }
}

pub fn write_csv(report: &ThroughputReport, out: impl Write) -> Result<(), ReportError> {
    let c = &report.config;
    let (alt, same) = match c.rebuild {
        RebuildMode::Off => (None, None),
        RebuildMode::Continuous {
            alt_buckets,
            same_hash,
        } => (Some(alt_buckets), Some(same_hash)),
    };
    let mut w = csv::Writer::from_writer(out);
    w.serialize(Row {
        elapsed_s: Some(report.elapsed_secs),
        mix: Some(c.mix.to_string()),
        load_factor: Some(c.load_factor),
        buckets: Some(c.buckets),
        key_range: Some(c.key_range),
        threads: Some(c.threads),
        duration_ns: Some(c.duration.as_nanos() as u64),
        rebuild: Some(c.rebuild.name().into()),
        alt_buckets: alt,
        same_hash: same,
        seed: Some(c.seed),
        pin: Some(c.pinning.to_string()),
        pinned: Some(report.host.pinned),
        cpus: Some(report.host.cpus),
        os: Some(report.host.os.clone()),
        arch: Some(report.host.arch.clone()),
        generator: Some(report.host.generator.clone()),
        prefilled: Some(report.prefilled),
        final_census: Some(report.final_census),
        rebuild_count: Some(report.rebuild_seconds.len()),
        rebuild_mean_s: Some(report.rebuild_mean()),
        rebuild_std_s: Some(report.rebuild_std()),
        rebuild_seconds: Some(
            report
                .rebuild_seconds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        ),
        ..counts_row("summary", &report.totals, report.ops_per_sec())
    })?;
    for t in &report.threads {
        w.serialize(Row {
            thread: Some(t.thread),
            cpu: t.cpu,
            ..counts_row("thread", &t.counts, report.thread_ops_per_sec(t))
        })?;
    }
    w.flush()?;
    Ok(())
}

fn need<T>(v: Option<T>, what: &str) -> Result<T, ReportError> {
    v.ok_or_else(|| ReportError::Malformed(format!("summary row lacks {what}")))
}

pub fn read_csv(input: impl Read) -> Result<ThroughputReport, ReportError> {
    let mut r = csv::Reader::from_reader(input);
    let rows: Vec<Row> = r.deserialize().collect::<Result<_, _>>()?;
    let (summary, threads) = rows
        .split_first()
        .ok_or_else(|| ReportError::Malformed("no rows".into()))?;
    if summary.row != "summary" || threads.iter().any(|t| t.row != "thread") {
        return Err(ReportError::Malformed(
            "expected one summary row then thread rows".into(),
        ));
    }
    let s = summary;
    let mix: Mix = need(s.mix.clone(), "mix")?
        .parse()
        .map_err(|e| ReportError::Malformed(format!("{e}")))?;
    let rebuild = match need(s.rebuild.as_deref(), "rebuild")? {
        "off" => RebuildMode::Off,
        "continuous" => RebuildMode::Continuous {
            alt_buckets: need(s.alt_buckets, "alt_buckets")?,
            same_hash: need(s.same_hash, "same_hash")?,
        },
        other => return Err(ReportError::Malformed(format!("rebuild mode {other:?}"))),
    };
    let pinning: Pinning = need(s.pin.as_deref(), "pin")?
        .parse()
        .map_err(|e| ReportError::Malformed(format!("{e}")))?;
    let rebuild_seconds = s
        .rebuild_seconds
        .as_deref()
        .unwrap_or("")
        .split(';')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|e| ReportError::Malformed(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ThroughputReport {
        config: WorkloadConfig {
            mix,
            load_factor: need(s.load_factor, "load_factor")?,
            buckets: need(s.buckets, "buckets")?,
            key_range: need(s.key_range, "key_range")?,
            threads: need(s.threads, "threads")?,
            duration: Duration::from_nanos(need(s.duration_ns, "duration_ns")?),
            rebuild,
            seed: need(s.seed, "seed")?,
            pinning,
        },
        host: HostInfo {
            cpus: need(s.cpus, "cpus")?,
            os: need(s.os.clone(), "os")?,
            arch: need(s.arch.clone(), "arch")?,
            pinned: need(s.pinned, "pinned")?,
            generator: need(s.generator.clone(), "generator")?,
        },
        elapsed_secs: need(s.elapsed_s, "elapsed_s")?,
        totals: row_counts(s),
        threads: threads
            .iter()
            .map(|t| {
                Ok(ThreadReport {
                    thread: t
                        .thread
                        .ok_or_else(|| ReportError::Malformed("thread row lacks thread".into()))?,
                    cpu: t.cpu,
                    counts: row_counts(t),
                })
            })
            .collect::<Result<_, ReportError>>()?,
        rebuild_seconds,
        prefilled: need(s.prefilled, "prefilled")?,
        final_census: need(s.final_census, "final_census")?,
    })
}

pub fn write_json(report: &ThroughputReport, mut out: impl Write) -> Result<(), ReportError> {
    serde_json::to_writer_pretty(&mut out, report)?;
    writeln!(out)?;
    Ok(())
}

pub fn read_json(input: impl Read) -> Result<ThroughputReport, ReportError> {
    Ok(serde_json::from_reader(input)?)
}

pub fn render_text(report: &ThroughputReport) -> String {
    let c = &report.config;
    let t = &report.totals;
    let mut s = String::new();
    let _ =
        writeln!(
        s,
        "mix {} | alpha {} | buckets {} | keys {} | threads {} | rebuild {} | seed {} | pin {}{}",
        c.mix,
        c.load_factor,
        c.buckets,
        c.key_range,
        c.threads,
        c.rebuild.name(),
        c.seed,
        c.pinning,
        if report.host.pinned { "" } else { " (unpinned)" }
    );
    let _ = writeln!(
        s,
        "{:.3} Mops/s over {:.2}s: lookup {} ({} hit), insert {} ({} ok), delete {} ({} ok)",
        report.ops_per_sec() / 1e6,
        report.elapsed_secs,
        t.lookups,
        t.lookup_hits,
        t.inserts,
        t.insert_ok,
        t.deletes,
        t.delete_ok
    );
    if !report.rebuild_seconds.is_empty() {
        let _ = writeln!(
            s,
            "rebuilds {} mean {:.3} ms sd {:.3} ms",
            report.rebuild_seconds.len(),
            report.rebuild_mean() * 1e3,
            report.rebuild_std() * 1e3
        );
    }
    let _ = writeln!(
        s,
        "prefilled {} final census {}",
        report.prefilled, report.final_census
    );
    for th in &report.threads {
        let _ = writeln!(
            s,
            "  thread {:>3} cpu {:>4} {:>12} ops {:.3} Mops/s",
            th.thread,
            th.cpu.map_or("-".into(), |c| c.to_string()),
            th.counts.total(),
            report.thread_ops_per_sec(th) / 1e6
        );
    }
    s
}

pub fn emit_report(
    report: &ThroughputReport,
    format: Format,
    out: impl Write,
) -> Result<(), ReportError> {
    match format {
        Format::Csv => write_csv(report, out),
        Format::Json => write_json(report, out),
        Format::Text => {
            let mut out = out;
            out.write_all(render_text(report).as_bytes())?;
            Ok(())
        }
    }
}
