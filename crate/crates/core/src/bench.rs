//! Benchmark harness: run metrics, suites and reports.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{start, EngineConfig, EngineError, RunReport};
use crate::parser::{parse_program, ParseError};
use crate::plan::{CompileError, OperatorPlan, Target};
use crate::stream_io::{open_source, Emission, Sink, SourceConfig, SourceError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Suite {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{path}:\n{source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("query {query}: {source}")]
    Compile {
        query: String,
        #[source]
        source: CompileError,
    },
    #[error("query {query}: {source}")]
    Source {
        query: String,
        #[source]
        source: SourceError,
    },
    #[error("query {query} on {engine}: {source}")]
    Engine {
        query: String,
        engine: Target,
        #[source]
        source: EngineError,
    },
    #[error("invalid suite: {0}")]
    Invalid(String),
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[u64], q: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Measurements of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub query: String,
    pub engine: Target,
    pub group: u8,
    pub repetition: usize,
    pub total_records_in: u64,
    pub total_facts_out: u64,
    pub wall_duration_ms: f64,
    pub throughput_tps: f64,
    pub latency_p50_us: Option<u64>,
    pub latency_p95_us: Option<u64>,
    pub latency_p99_us: Option<u64>,
    pub eval_duration_ms: Vec<f64>,
    /// Order-insensitive digest of the sink output.
    pub result_hash: String,
}

impl RunMetrics {
    pub fn from_report(query: &str, group: u8, repetition: usize, report: &RunReport, result_hash: String) -> Self {
        let mut lat = report.latencies_us.clone();
        lat.sort_unstable();
        let wall_ms = report.wall_duration.as_secs_f64() * 1000.0;
        RunMetrics {
            query: query.to_string(),
            engine: report.engine,
            group,
            repetition,
            total_records_in: report.records_in,
            total_facts_out: report.facts_out,
            wall_duration_ms: wall_ms,
            throughput_tps: throughput(report.records_in, wall_ms),
            latency_p50_us: percentile(&lat, 50.0),
            latency_p95_us: percentile(&lat, 95.0),
            latency_p99_us: percentile(&lat, 99.0),
            eval_duration_ms: report
                .triggers
                .iter()
                .map(|t| t.eval_duration.as_secs_f64() * 1000.0)
                .collect(),
            result_hash,
        }
    }
}

/// Records per second.
pub fn throughput(records: u64, wall_duration_ms: f64) -> f64 {
    if wall_duration_ms <= 0.0 {
        return 0.0;
    }
    records as f64 / (wall_duration_ms / 1000.0)
}

/// Sink that keeps only a line count and an order-insensitive hash of the
/// output lines.
#[derive(Debug, Clone, Default)]
pub struct HashingSink {
    lines: Arc<AtomicU64>,
    digest: Arc<AtomicU64>,
}

impl HashingSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> u64 {
        self.lines.load(Ordering::Relaxed)
    }

    /// Line count and digest as 16 + 16 hex digits.
    pub fn hash(&self) -> String {
        format!("{:016x}{:016x}", self.lines(), self.digest.load(Ordering::Relaxed))
    }

    fn add(&self, t: u64, predicate: &str, tuple: &[crate::model::Value]) {
        let mut h = DefaultHasher::new();
        (t, predicate, tuple).hash(&mut h);
        // Mix so that equal lines do not cancel out.
        let v = h.finish().wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
        self.digest.fetch_add(v, Ordering::Relaxed);
        self.lines.fetch_add(1, Ordering::Relaxed);
    }
}

impl Sink for HashingSink {
    fn emit(&mut self, emission: &Emission) -> io::Result<()> {
        match emission {
            Emission::Pane {
                trigger_ms,
                predicate,
                tuples,
            } => {
                for t in tuples {
                    self.add(*trigger_ms, predicate, t);
                }
            }
            Emission::Record {
                timestamp_ms,
                predicate,
                tuple,
            } => self.add(*timestamp_ms, predicate, tuple),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySpec {
    pub name: String,
    /// Relative to the suite file.
    pub program: PathBuf,
    /// 1: stateful operators, 2: stateless only.
    pub group: u8,
    pub engines: Vec<Target>,
    /// Source string as accepted by [`SourceConfig`].
    pub source: String,
    pub batch_interval_ms: Option<u64>,
    pub parallelism: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(rename = "query")]
    pub queries: Vec<QuerySpec>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> usize {
    1
}

pub fn load_suite(path: &Path) -> Result<Suite, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut suite: Suite = toml::from_str(&text).map_err(|e| BenchError::Suite {
        path: path.to_path_buf(),
        source: e,
    })?;
    suite.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for q in &suite.queries {
        if !(1..=2).contains(&q.group) {
            return Err(BenchError::Invalid(format!("query {}: group must be 1 or 2", q.name)));
        }
        if q.engines.is_empty() {
            return Err(BenchError::Invalid(format!("query {}: no engines", q.name)));
        }
    }
    if suite.repetitions == 0 {
        return Err(BenchError::Invalid("repetitions must be positive".into()));
    }
    Ok(suite)
}

#[derive(Debug, Clone, Default)]
pub struct BenchOptions {
    pub repetitions: Option<usize>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub batch_interval_ms: Option<u64>,
}

impl Suite {
    pub fn program_path(&self, q: &QuerySpec) -> PathBuf {
        self.base_dir.join(&q.program)
    }

    /// Runs every query × engine × repetition sequentially, calling
    /// `on_run` after each.
    pub fn run(
        &self,
        options: &BenchOptions,
        mut on_run: impl FnMut(&RunMetrics),
    ) -> Result<Vec<RunMetrics>, BenchError> {
        let reps = options.repetitions.unwrap_or(self.repetitions);
        let mut out = Vec::new();
        for q in &self.queries {
            let path = self.program_path(q);
            let text = std::fs::read_to_string(&path).map_err(|e| BenchError::Io {
                path: path.clone(),
                source: e,
            })?;
            let program = parse_program(&text).map_err(|e| BenchError::Parse {
                path: path.clone(),
                source: e,
            })?;
            let mut source: SourceConfig = q.source.parse().map_err(|e| BenchError::Source {
                query: q.name.clone(),
                source: e,
            })?;
            if let Some(seed) = options.seed {
                source = source.with_seed(seed);
            }
            for &engine in &q.engines {
                let plan = OperatorPlan::build(&program, engine).map_err(|e| BenchError::Compile {
                    query: q.name.clone(),
                    source: e,
                })?;
                let config = EngineConfig {
                    engine,
                    batch_interval_ms: options
                        .batch_interval_ms
                        .or(q.batch_interval_ms)
                        .unwrap_or(EngineConfig::default().batch_interval_ms),
                    parallelism: options.parallelism.or(q.parallelism).unwrap_or(1),
                    ..EngineConfig::default()
                };
                for rep in 0..reps {
                    let m = run_once(q, &plan, &source, &config, rep)?;
                    on_run(&m);
                    out.push(m);
                }
            }
        }
        Ok(out)
    }
}

fn run_once(
    q: &QuerySpec,
    plan: &OperatorPlan,
    source: &SourceConfig,
    config: &EngineConfig,
    rep: usize,
) -> Result<RunMetrics, BenchError> {
    let engine_err = |e| BenchError::Engine {
        query: q.name.clone(),
        engine: config.engine,
        source: e,
    };
    let src = open_source(source).map_err(|e| BenchError::Source {
        query: q.name.clone(),
        source: e,
    })?;
    let sink = HashingSink::new();
    let report = start(plan.clone(), src, Box::new(sink.clone()), config)
        .and_then(|h| h.join())
        .map_err(engine_err)?;
    Ok(RunMetrics::from_report(&q.name, q.group, rep, &report, sink.hash()))
}

/// Aggregate over the repetitions of one query on one engine.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub query: String,
    pub engine: Target,
    pub group: u8,
    pub runs: usize,
    pub records_in: u64,
    pub facts_out: u64,
    pub throughput_mean: f64,
    pub throughput_stddev: f64,
    pub p50_us_mean: Option<f64>,
    pub p50_us_stddev: Option<f64>,
    pub p99_us_mean: Option<f64>,
    pub eval_ms_mean: f64,
    /// The common result hash, or `mixed` when repetitions disagree.
    pub result_hash: String,
}

/// Mean and sample standard deviation.
pub fn mean_stddev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[RunMetrics]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, Target)> = Vec::new();
    let mut cells: BTreeMap<(String, Target), Vec<&RunMetrics>> = BTreeMap::new();
    for r in runs {
        let key = (r.query.clone(), r.engine);
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &cells[&key];
            let (tm, ts) = mean_stddev(&rs.iter().map(|r| r.throughput_tps).collect::<Vec<_>>());
            let p50: Vec<f64> = rs.iter().filter_map(|r| r.latency_p50_us).map(|v| v as f64).collect();
            let p99: Vec<f64> = rs.iter().filter_map(|r| r.latency_p99_us).map(|v| v as f64).collect();
            let (pm, ps) = mean_stddev(&p50);
            let evals: Vec<f64> = rs.iter().flat_map(|r| r.eval_duration_ms.iter().copied()).collect();
            let hash = &rs[0].result_hash;
            SummaryRow {
                query: key.0.clone(),
                engine: key.1,
                group: rs[0].group,
                runs: rs.len(),
                records_in: rs[0].total_records_in,
                facts_out: rs[0].total_facts_out,
                throughput_mean: tm,
                throughput_stddev: ts,
                p50_us_mean: (!p50.is_empty()).then_some(pm),
                p50_us_stddev: (!p50.is_empty()).then_some(ps),
                p99_us_mean: (!p99.is_empty()).then(|| mean_stddev(&p99).0),
                eval_ms_mean: mean_stddev(&evals).0,
                result_hash: if rs.iter().all(|r| &r.result_hash == hash) {
                    hash.clone()
                } else {
                    "mixed".into()
                },
            }
        })
        .collect()
}

const HEADER: [&str; 13] = [
    "query",
    "engine",
    "group",
    "runs",
    "records_in",
    "facts_out",
    "tps_mean",
    "tps_stddev",
    "p50_us_mean",
    "p50_us_stddev",
    "p99_us_mean",
    "eval_ms_mean",
    "result_hash",
];

fn cells(r: &SummaryRow) -> [String; 13] {
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
    [
        r.query.clone(),
        r.engine.to_string(),
        r.group.to_string(),
        r.runs.to_string(),
        r.records_in.to_string(),
        r.facts_out.to_string(),
        format!("{:.0}", r.throughput_mean),
        format!("{:.0}", r.throughput_stddev),
        opt(r.p50_us_mean),
        opt(r.p50_us_stddev),
        opt(r.p99_us_mean),
        format!("{:.3}", r.eval_ms_mean),
        r.result_hash.clone(),
    ]
}

pub fn write_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> io::Result<()> {
    writeln!(w, "{}", HEADER.join(","))?;
    for r in rows {
        writeln!(w, "{}", cells(r).join(","))?;
    }
    w.flush()
}

/// Line-delimited JSON, one object per run.
pub fn write_jsonl<W: Write>(mut w: W, runs: &[RunMetrics]) -> io::Result<()> {
    for r in runs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Column-aligned text table.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let body: Vec<[String; 13]> = rows.iter().map(cells).collect();
    let mut widths: Vec<usize> = HEADER.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: Vec<&str>| {
        let parts: Vec<String> = cols
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(HEADER.to_vec());
    for row in &body {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
