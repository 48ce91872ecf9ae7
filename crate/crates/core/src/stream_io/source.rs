use std::fs::File;
use std::io::{BufRead, BufReader, Cursor};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use super::generate::{generate, Workload};
use super::{parse_line, SourceError};
use crate::model::Fact;

/// How facts get their timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestampMode {
    /// Milliseconds since the source opened, from a monotonic clock.
    Ingestion,
    /// The fourth TSV column; lines without it are malformed.
    Column,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    File(PathBuf),
    Tcp(String),
    Generator(Workload),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    pub kind: SourceKind,
    /// `None` replays as fast as possible.
    pub rate_per_sec: Option<u64>,
    pub timestamps: TimestampMode,
}

impl SourceConfig {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        SourceConfig {
            kind: SourceKind::File(path.into()),
            rate_per_sec: None,
            timestamps: TimestampMode::Column,
        }
    }

    pub fn with_rate(mut self, rate_per_sec: u64) -> Self {
        self.rate_per_sec = Some(rate_per_sec);
        self
    }

    /// Reseeds a generator source; other kinds are unchanged.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let SourceKind::Generator(w) = self.kind {
            self.kind = SourceKind::Generator(w.with_seed(seed));
        }
        self
    }

    pub fn with_timestamps(mut self, mode: TimestampMode) -> Self {
        self.timestamps = mode;
        self
    }
}

impl FromStr for SourceConfig {
    type Err = SourceError;

    /// `file:PATH[,rate=N][,ts=column|ingestion]`, `tcp:ADDR[,...]` or
    /// `gen:KIND[,key=value...]` (generator keys are passed to [`Workload`]).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| SourceError::Config(format!("`{s}`: expected file:, tcp: or gen:")))?;
        let mut parts = rest.split(',');
        let target = parts.next().unwrap_or_default();
        let mut rate = None;
        let mut ts = None;
        let mut extra = Vec::new();
        for opt in parts {
            match opt.split_once('=') {
                Some(("rate", n)) => {
                    let n: u64 =
                        n.parse().ok().filter(|n| *n > 0).ok_or_else(|| {
                            SourceError::Config(format!("rate must be a positive integer, got `{n}`"))
                        })?;
                    rate = Some(n);
                }
                Some(("ts", "column")) => ts = Some(TimestampMode::Column),
                Some(("ts", "ingestion")) => ts = Some(TimestampMode::Ingestion),
                Some(("ts", other)) => return Err(SourceError::Config(format!("unknown timestamp mode `{other}`"))),
                _ => extra.push(opt),
            }
        }
        let (kind, default_ts) = match scheme {
            "file" => (SourceKind::File(PathBuf::from(target)), TimestampMode::Column),
            "tcp" => (SourceKind::Tcp(target.to_string()), TimestampMode::Ingestion),
            "gen" => {
                let mut spec = target.to_string();
                for e in &extra {
                    spec.push(',');
                    spec.push_str(e);
                }
                extra.clear();
                (
                    SourceKind::Generator(spec.parse().map_err(SourceError::Config)?),
                    TimestampMode::Column,
                )
            }
            other => return Err(SourceError::Config(format!("unknown source kind `{other}`"))),
        };
        if let Some(bad) = extra.first() {
            return Err(SourceError::Config(format!("unknown source option `{bad}`")));
        }
        if target.is_empty() {
            return Err(SourceError::Config(format!("`{s}`: missing {scheme} target")));
        }
        Ok(SourceConfig {
            kind,
            rate_per_sec: rate,
            timestamps: ts.unwrap_or(default_ts),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub emitted: u64,
    /// Malformed or out-of-order lines that were dropped.
    pub skipped: u64,
}

/// Pull-based stream of facts in non-decreasing timestamp order.
pub trait StreamSource: Send {
    fn next_fact(&mut self) -> Result<Option<Fact>, SourceError>;

    /// Wall-clock origin of the timestamps, for ingestion-time sources.
    /// `None` means timestamps are stream time only.
    fn epoch(&self) -> Option<Instant>;

    fn stats(&self) -> SourceStats;
}

impl<S: StreamSource + ?Sized> StreamSource for Box<S> {
    fn next_fact(&mut self) -> Result<Option<Fact>, SourceError> {
        (**self).next_fact()
    }

    fn epoch(&self) -> Option<Instant> {
        (**self).epoch()
    }

    fn stats(&self) -> SourceStats {
        (**self).stats()
    }
}

/// Scripted facts, for tests and embedding. Stream time only.
#[derive(Debug, Clone, Default)]
pub struct VecSource {
    facts: std::vec::IntoIter<Fact>,
    emitted: u64,
}

impl VecSource {
    /// Facts are sorted by timestamp (stable).
    pub fn new(mut facts: Vec<Fact>) -> Self {
        facts.sort_by_key(|f| f.timestamp_ms);
        VecSource {
            facts: facts.into_iter(),
            emitted: 0,
        }
    }
}

impl StreamSource for VecSource {
    fn next_fact(&mut self) -> Result<Option<Fact>, SourceError> {
        let f = self.facts.next();
        self.emitted += u64::from(f.is_some());
        Ok(f)
    }

    fn epoch(&self) -> Option<Instant> {
        None
    }

    fn stats(&self) -> SourceStats {
        SourceStats {
            emitted: self.emitted,
            skipped: 0,
        }
    }
}

/// TSV lines from any reader, with optional rate pacing.
pub struct LineSource<R> {
    reader: R,
    context: String,
    mode: TimestampMode,
    rate_per_sec: Option<u64>,
    epoch: Instant,
    last_ts: u64,
    stats: SourceStats,
    line: String,
}

impl<R: BufRead + Send> LineSource<R> {
    pub fn new(reader: R, context: impl Into<String>, mode: TimestampMode, rate_per_sec: Option<u64>) -> Self {
        LineSource {
            reader,
            context: context.into(),
            mode,
            rate_per_sec,
            epoch: Instant::now(),
            last_ts: 0,
            stats: SourceStats::default(),
            line: String::new(),
        }
    }

    fn pace(&self) {
        if let Some(rate) = self.rate_per_sec {
            let due = self.epoch + Duration::from_secs_f64(self.stats.emitted as f64 / rate as f64);
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
    }
}

impl<R: BufRead + Send> StreamSource for LineSource<R> {
    fn next_fact(&mut self) -> Result<Option<Fact>, SourceError> {
        loop {
            self.line.clear();
            let n = self.reader.read_line(&mut self.line).map_err(|e| SourceError::Io {
                context: self.context.clone(),
                source: e,
            })?;
            if n == 0 {
                if self.stats.skipped > 0 {
                    log::warn!("{}: skipped {} malformed lines", self.context, self.stats.skipped);
                }
                return Ok(None);
            }
            let text = self.line.trim_end_matches('\n');
            if text.trim().is_empty() {
                continue;
            }
            let Some((triple, column)) = parse_line(text) else {
                self.stats.skipped += 1;
                continue;
            };
            let ts = match self.mode {
                TimestampMode::Column => match column {
                    Some(ts) if ts >= self.last_ts => ts,
                    _ => {
                        self.stats.skipped += 1;
                        continue;
                    }
                },
                TimestampMode::Ingestion => {
                    self.pace();
                    (self.epoch.elapsed().as_millis() as u64).max(self.last_ts)
                }
            };
            if self.mode == TimestampMode::Column {
                self.pace();
            }
            self.last_ts = ts;
            self.stats.emitted += 1;
            return Ok(Some(triple.to_fact(ts)));
        }
    }

    fn epoch(&self) -> Option<Instant> {
        (self.mode == TimestampMode::Ingestion).then_some(self.epoch)
    }

    fn stats(&self) -> SourceStats {
        self.stats
    }
}

/// Accepts one connection and reads TSV lines from it until EOF.
pub struct TcpSource {
    listener: Option<TcpListener>,
    addr: SocketAddr,
    mode: TimestampMode,
    rate_per_sec: Option<u64>,
    epoch: Instant,
    inner: Option<LineSource<BufReader<std::net::TcpStream>>>,
}

impl TcpSource {
    pub fn bind(addr: &str, mode: TimestampMode, rate_per_sec: Option<u64>) -> Result<Self, SourceError> {
        let listener = TcpListener::bind(addr).map_err(|e| SourceError::Io {
            context: format!("tcp {addr}"),
            source: e,
        })?;
        let addr = listener.local_addr().map_err(|e| SourceError::Io {
            context: format!("tcp {addr}"),
            source: e,
        })?;
        Ok(TcpSource {
            listener: Some(listener),
            addr,
            mode,
            rate_per_sec,
            epoch: Instant::now(),
            inner: None,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl StreamSource for TcpSource {
    fn next_fact(&mut self) -> Result<Option<Fact>, SourceError> {
        if self.inner.is_none() {
            let Some(listener) = self.listener.take() else {
                return Ok(None);
            };
            let (stream, peer) = listener.accept().map_err(|e| SourceError::Io {
                context: format!("tcp {}", self.addr),
                source: e,
            })?;
            let mut inner = LineSource::new(
                BufReader::new(stream),
                format!("tcp {peer}"),
                self.mode,
                self.rate_per_sec,
            );
            inner.epoch = self.epoch;
            self.inner = Some(inner);
        }
        self.inner.as_mut().expect("connected").next_fact()
    }

    fn epoch(&self) -> Option<Instant> {
        (self.mode == TimestampMode::Ingestion).then_some(self.epoch)
    }

    fn stats(&self) -> SourceStats {
        self.inner.as_ref().map(|s| s.stats()).unwrap_or_default()
    }
}

pub fn open_source(config: &SourceConfig) -> Result<Box<dyn StreamSource>, SourceError> {
    Ok(match &config.kind {
        SourceKind::File(path) => {
            let file = File::open(path).map_err(|e| SourceError::Io {
                context: path.display().to_string(),
                source: e,
            })?;
            Box::new(LineSource::new(
                BufReader::with_capacity(1 << 16, file),
                path.display().to_string(),
                config.timestamps,
                config.rate_per_sec,
            ))
        }
        SourceKind::Tcp(addr) => Box::new(TcpSource::bind(addr, config.timestamps, config.rate_per_sec)?),
        SourceKind::Generator(workload) => {
            let mut text = Vec::new();
            super::write_tsv(&mut text, &generate(workload)).map_err(|e| SourceError::Io {
                context: "generator".into(),
                source: e,
            })?;
            Box::new(LineSource::new(
                Cursor::new(text),
                format!("gen:{}", workload.name()),
                config.timestamps,
                config.rate_per_sec,
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn drain(src: &mut dyn StreamSource) -> Vec<Fact> {
        let mut out = Vec::new();
        while let Some(f) = src.next_fact().unwrap() {
            out.push(f);
        }
        out
    }

    #[test]
    fn column_mode_reads_file_timestamps() {
        let mut tmp = tempfile::NamedTempFile::new().unwrap();
        write!(
            tmp,
            "o1\ttype\trainObs\t100\no1\tprocedure\ts1\t150\no2\ttype\ttempObs\t300\n"
        )
        .unwrap();
        let mut src = open_source(&SourceConfig::file(tmp.path())).unwrap();
        let facts = drain(&mut src);
        assert_eq!(
            facts.iter().map(|f| f.timestamp_ms).collect::<Vec<_>>(),
            [100, 150, 300]
        );
        assert!(src.epoch().is_none());
    }

    #[test]
    fn malformed_lines_are_counted() {
        let text = "a\tp\tb\t1\nbroken line\na\tp\tc\t2\n";
        let mut src = LineSource::new(Cursor::new(text), "test", TimestampMode::Column, None);
        assert_eq!(drain(&mut src).len(), 2);
        assert_eq!(src.stats().skipped, 1);
    }

    #[test]
    fn out_of_order_lines_are_skipped() {
        let text = "a\tp\tb\t10\na\tp\tc\t5\na\tp\td\t10\n";
        let mut src = LineSource::new(Cursor::new(text), "test", TimestampMode::Column, None);
        let facts = drain(&mut src);
        assert_eq!(facts.len(), 2);
        assert_eq!(src.stats().skipped, 1);
    }

    #[test]
    fn ingestion_mode_is_monotonic() {
        let text = "a\tp\tb\na\tp\tc\n".repeat(50);
        let mut src = LineSource::new(Cursor::new(text), "test", TimestampMode::Ingestion, Some(20_000));
        let facts = drain(&mut src);
        assert_eq!(facts.len(), 100);
        assert!(facts.windows(2).all(|w| w[0].timestamp_ms <= w[1].timestamp_ms));
        assert!(src.epoch().is_some());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = open_source(&SourceConfig::file("/nonexistent/input.tsv"))
            .err()
            .unwrap();
        assert!(matches!(err, SourceError::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/input.tsv"));
    }

    #[test]
    fn config_strings() {
        let c: SourceConfig = "file:data.tsv,rate=500".parse().unwrap();
        assert_eq!(c.kind, SourceKind::File("data.tsv".into()));
        assert_eq!(c.rate_per_sec, Some(500));
        assert_eq!(c.timestamps, TimestampMode::Column);
        let c: SourceConfig = "file:data.tsv,ts=ingestion".parse().unwrap();
        assert_eq!(c.timestamps, TimestampMode::Ingestion);
        let c: SourceConfig = "tcp:127.0.0.1:0".parse().unwrap();
        assert_eq!(c.kind, SourceKind::Tcp("127.0.0.1:0".into()));
        let c: SourceConfig = "gen:sensor,n=10,seed=7,rate=100".parse().unwrap();
        assert!(matches!(
            c.kind,
            SourceKind::Generator(Workload::Sensor { n: 10, seed: 7, .. })
        ));
        assert_eq!(c.rate_per_sec, Some(100));
        assert!("ftp:x".parse::<SourceConfig>().is_err());
        assert!("file:x,rate=0".parse::<SourceConfig>().is_err());
        assert!("file:x,bogus=1".parse::<SourceConfig>().is_err());
        assert!("nocolon".parse::<SourceConfig>().is_err());
    }

    #[test]
    fn tcp_source_reads_lines() {
        let mut src = TcpSource::bind("127.0.0.1:0", TimestampMode::Column, None).unwrap();
        let addr = src.local_addr();
        let writer = std::thread::spawn(move || {
            let mut s = std::net::TcpStream::connect(addr).unwrap();
            s.write_all(b"a\tp\tb\t1\na\tp\tc\t2\n").unwrap();
        });
        let facts = drain(&mut src);
        writer.join().unwrap();
        assert_eq!(facts.len(), 2);
    }
}
