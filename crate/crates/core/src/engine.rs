//! Types shared by the two execution engines.

use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::bsp::{run_bsp, BatchConfig, BatchResult, ClockMode};
use crate::plan::{OperatorPlan, Target};
use crate::rat::{run_rat, RatConfig, SinkMode};
use crate::stream_io::{Sink, SourceError, StreamSource};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error("plan not executable: {0}")]
    Plan(String),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("sink: {0}")]
    Sink(#[source] std::io::Error),
    #[error("engine task panicked: {0}")]
    Panicked(String),
}

/// Timing of one trigger (BSP batch or RAT pane).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TriggerStats {
    pub trigger_ms: u64,
    pub eval_duration: Duration,
    /// Output lines produced at this trigger.
    pub facts_out: u64,
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub engine: Target,
    pub records_in: u64,
    /// Malformed input lines dropped by the source.
    pub skipped: u64,
    pub facts_out: u64,
    pub wall_duration: Duration,
    /// Per-record input-to-output latency, microseconds, in no particular order.
    pub latencies_us: Vec<u64>,
    pub triggers: Vec<TriggerStats>,
    /// Full per-trigger results (BSP only, when requested).
    pub batches: Vec<BatchResult>,
}

impl RunReport {
    pub(crate) fn new(engine: Target) -> Self {
        RunReport {
            engine,
            records_in: 0,
            skipped: 0,
            facts_out: 0,
            wall_duration: Duration::ZERO,
            latencies_us: Vec::new(),
            triggers: Vec::new(),
            batches: Vec::new(),
        }
    }
}

/// A run executing on background threads.
pub struct RunHandle {
    thread: JoinHandle<Result<RunReport, EngineError>>,
}

impl RunHandle {
    pub(crate) fn spawn(
        name: &str,
        f: impl FnOnce() -> Result<RunReport, EngineError> + Send + 'static,
    ) -> Result<Self, EngineError> {
        let thread = std::thread::Builder::new()
            .name(name.to_string())
            .spawn(f)
            .map_err(|e| EngineError::Config(format!("cannot spawn engine thread: {e}")))?;
        Ok(RunHandle { thread })
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }

    /// Waits for the run to end.
    pub fn join(self) -> Result<RunReport, EngineError> {
        self.thread
            .join()
            .unwrap_or_else(|p| Err(EngineError::Panicked(panic_message(p))))
    }
}

pub(crate) fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// Settings for either engine; fields that do not apply are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineConfig {
    pub engine: Target,
    pub batch_interval_ms: u64,
    pub parallelism: usize,
    pub channel_capacity: usize,
    pub sink_mode: SinkMode,
    pub clock: ClockMode,
    pub end_time_ms: Option<u64>,
    pub collect_results: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let rat = RatConfig::default();
        EngineConfig {
            engine: Target::Bsp,
            batch_interval_ms: BatchConfig::default().batch_interval_ms,
            parallelism: 1,
            channel_capacity: rat.channel_capacity,
            sink_mode: rat.sink_mode,
            clock: ClockMode::Auto,
            end_time_ms: None,
            collect_results: false,
        }
    }
}

impl EngineConfig {
    pub fn batch(&self) -> BatchConfig {
        BatchConfig {
            batch_interval_ms: self.batch_interval_ms,
            clock: self.clock,
            parallelism: self.parallelism,
            end_time_ms: self.end_time_ms,
            collect_results: self.collect_results,
            ..BatchConfig::default()
        }
    }

    pub fn rat(&self) -> RatConfig {
        RatConfig {
            parallelism: self.parallelism,
            channel_capacity: self.channel_capacity,
            sink_mode: self.sink_mode,
            clock: self.clock,
            end_time_ms: self.end_time_ms,
        }
    }
}

/// Starts `config.engine` on the plan.
pub fn start<S: StreamSource + 'static>(
    plan: OperatorPlan,
    source: S,
    sink: Box<dyn Sink>,
    config: &EngineConfig,
) -> Result<RunHandle, EngineError> {
    match config.engine {
        Target::Bsp => run_bsp(plan, source, sink, config.batch()),
        Target::Rat => run_rat(plan, source, sink, config.rat()),
    }
}
