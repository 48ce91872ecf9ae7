use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use crate::model::{Tuple, Value};

/// Output of an engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Emission {
    /// Full contents of a relation predicate at a trigger time.
    Pane {
        trigger_ms: u64,
        predicate: Value,
        tuples: Vec<Tuple>,
    },
    /// One derived stream fact.
    Record {
        timestamp_ms: u64,
        predicate: Value,
        tuple: Tuple,
    },
}

impl Emission {
    pub fn time_ms(&self) -> u64 {
        match self {
            Emission::Pane { trigger_ms, .. } => *trigger_ms,
            Emission::Record { timestamp_ms, .. } => *timestamp_ms,
        }
    }

    pub fn predicate(&self) -> &Value {
        match self {
            Emission::Pane { predicate, .. } | Emission::Record { predicate, .. } => predicate,
        }
    }

    /// Number of output lines this emission produces.
    pub fn len(&self) -> usize {
        match self {
            Emission::Pane { tuples, .. } => tuples.len(),
            Emission::Record { .. } => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub trait Sink: Send {
    fn emit(&mut self, emission: &Emission) -> io::Result<()>;

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl<S: Sink + ?Sized> Sink for Box<S> {
    fn emit(&mut self, emission: &Emission) -> io::Result<()> {
        (**self).emit(emission)
    }

    fn flush(&mut self) -> io::Result<()> {
        (**self).flush()
    }
}

/// Writes `time<TAB>predicate<TAB>arg...` lines.
pub struct WriterSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> WriterSink<W> {
    pub fn new(out: W) -> Self {
        WriterSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }

    fn line(&mut self, t: u64, pred: &str, tuple: &[Value]) -> io::Result<()> {
        write!(self.out, "{t}\t{pred}")?;
        for v in tuple {
            write!(self.out, "\t{v}")?;
        }
        self.out.write_all(b"\n")
    }
}

impl<W: Write + Send> Sink for WriterSink<W> {
    fn emit(&mut self, emission: &Emission) -> io::Result<()> {
        match emission {
            Emission::Pane {
                trigger_ms,
                predicate,
                tuples,
            } => {
                for t in tuples {
                    self.line(*trigger_ms, predicate, t)?;
                }
                Ok(())
            }
            Emission::Record {
                timestamp_ms,
                predicate,
                tuple,
            } => self.line(*timestamp_ms, predicate, tuple),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// Collects emissions in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    buf: Arc<Mutex<Vec<Emission>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn emissions(&self) -> Vec<Emission> {
        self.buf.lock().expect("sink lock").clone()
    }

    pub fn take(&self) -> Vec<Emission> {
        std::mem::take(&mut *self.buf.lock().expect("sink lock"))
    }
}

impl Sink for MemorySink {
    fn emit(&mut self, emission: &Emission) -> io::Result<()> {
        self.buf.lock().expect("sink lock").push(emission.clone());
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkConfig {
    Stdout,
    File(PathBuf),
    Memory,
}

impl FromStr for SinkConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stdout" => Ok(SinkConfig::Stdout),
            "mem" => Ok(SinkConfig::Memory),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(SinkConfig::File(PathBuf::from(p))),
                _ => Err(format!("unknown sink `{s}`: expected stdout, file:PATH or mem")),
            },
        }
    }
}

pub fn open_sink(config: &SinkConfig) -> io::Result<Box<dyn Sink>> {
    Ok(match config {
        SinkConfig::Stdout => Box::new(WriterSink::new(BufWriter::new(io::stdout()))),
        SinkConfig::File(path) => {
            let f = File::create(path).map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
            Box::new(WriterSink::new(BufWriter::new(f)))
        }
        SinkConfig::Memory => Box::new(MemorySink::new()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tuple;

    #[test]
    fn writer_formats_lines() {
        let mut s = WriterSink::new(Vec::new());
        s.emit(&Emission::Pane {
            trigger_ms: 2000,
            predicate: "resIRI".into(),
            tuples: vec![tuple(&["o1", "s1"]), tuple(&["o2", "s1"])],
        })
        .unwrap();
        s.emit(&Emission::Record {
            timestamp_ms: 2001,
            predicate: "rain".into(),
            tuple: tuple(&["o3"]),
        })
        .unwrap();
        let text = String::from_utf8(s.into_inner()).unwrap();
        assert_eq!(text, "2000\tresIRI\to1\ts1\n2000\tresIRI\to2\ts1\n2001\train\to3\n");
    }

    #[test]
    fn memory_sink_is_shared() {
        let m = MemorySink::new();
        let mut handle: Box<dyn Sink> = Box::new(m.clone());
        handle
            .emit(&Emission::Pane {
                trigger_ms: 1,
                predicate: "p".into(),
                tuples: vec![],
            })
            .unwrap();
        assert_eq!(m.emissions().len(), 1);
        assert!(m.emissions()[0].is_empty());
    }

    #[test]
    fn config_strings() {
        assert_eq!("stdout".parse(), Ok(SinkConfig::Stdout));
        assert_eq!("mem".parse(), Ok(SinkConfig::Memory));
        assert_eq!("file:out.tsv".parse(), Ok(SinkConfig::File("out.tsv".into())));
        assert!("file:".parse::<SinkConfig>().is_err());
        assert!("kafka".parse::<SinkConfig>().is_err());
    }
}
