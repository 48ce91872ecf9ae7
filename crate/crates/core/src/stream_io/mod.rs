//! Stream sources and sinks.
//!
//! Records travel as tab-separated lines,
//! `subject<TAB>predicate<TAB>object[<TAB>timestamp_ms]`, and become binary
//! facts `predicate(subject, object)`.

mod generate;
mod sink;
mod source;

pub use generate::{generate, write_tsv, Workload, OBSERVATION_TYPES};
pub use sink::{open_sink, Emission, MemorySink, Sink, SinkConfig, WriterSink};
pub use source::{
    open_source, LineSource, SourceConfig, SourceKind, SourceStats, StreamSource, TcpSource, TimestampMode, VecSource,
};

use std::fmt;

use thiserror::Error;

use crate::model::{Fact, GroundAtom, Value};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid source configuration: {0}")]
    Config(String),
}

/// One RDF-style triple.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TripleRecord {
    pub subject: Value,
    pub predicate: Value,
    pub object: Value,
}

impl TripleRecord {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        TripleRecord {
            subject: Value::from(subject),
            predicate: Value::from(predicate),
            object: Value::from(object),
        }
    }

    pub fn to_atom(&self) -> GroundAtom {
        GroundAtom {
            predicate: self.predicate.clone(),
            args: vec![self.subject.clone(), self.object.clone()],
        }
    }

    pub fn to_fact(&self, timestamp_ms: u64) -> Fact {
        Fact::new(self.to_atom(), timestamp_ms)
    }
}

impl fmt::Display for TripleRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.subject, self.predicate, self.object)
    }
}

/// Parses one TSV line into a triple and its optional timestamp column.
/// Returns `None` for malformed lines.
pub fn parse_line(line: &str) -> Option<(TripleRecord, Option<u64>)> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let mut fields = line.split('\t');
    let s = fields.next()?;
    let p = fields.next()?;
    let o = fields.next()?;
    let ts = match fields.next() {
        Some(t) => Some(t.trim().parse::<u64>().ok()?),
        None => None,
    };
    if fields.next().is_some() || s.is_empty() || p.is_empty() || o.is_empty() {
        return None;
    }
    Some((TripleRecord::new(s, p, o), ts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_parsing() {
        let (t, ts) = parse_line("obs1\ttype\trainObs\t1000").unwrap();
        assert_eq!(t, TripleRecord::new("obs1", "type", "rainObs"));
        assert_eq!(ts, Some(1000));
        assert_eq!(parse_line("a\tb\tc").unwrap().1, None);
        assert!(parse_line("a\tb").is_none());
        assert!(parse_line("a\tb\tc\tnot-a-number").is_none());
        assert!(parse_line("a\tb\tc\t1\textra").is_none());
        assert!(parse_line("\tb\tc").is_none());
        assert_eq!(parse_line("a\tb\tc\t5\r").unwrap().1, Some(5));
    }

    #[test]
    fn triple_maps_to_binary_atom() {
        let a = TripleRecord::new("obs1", "procedure", "s1").to_atom();
        assert_eq!(a, GroundAtom::new("procedure", &["obs1", "s1"]));
    }
}
