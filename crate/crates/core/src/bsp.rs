//! Micro-batch execution: buffer the stream, and at each trigger evaluate
//! the whole program over the window contents.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, TryRecvError};

use crate::engine::{EngineError, RunHandle, RunReport, TriggerStats};
use crate::eval::{eval_components, BaseRelations, Evaluator};
use crate::model::{Fact, Relation, Tuple, Value, WindowSpec};
use crate::plan::{OperatorPlan, PredicateKind, Target};
use crate::store::FactStore;
use crate::stream_io::{Emission, Sink, SourceError, SourceStats, StreamSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClockMode {
    /// Live when the source has a wall-clock epoch, stream time otherwise.
    #[default]
    Auto,
    /// A trigger fires once a later fact arrives or the source ends.
    Stream,
    /// A trigger fires at its wall-clock instant.
    Live,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchConfig {
    pub batch_interval_ms: u64,
    pub clock: ClockMode,
    /// Evaluation threads.
    pub parallelism: usize,
    /// Keep firing triggers up to this stream time after the source ends.
    pub end_time_ms: Option<u64>,
    /// Keep every [`BatchResult`] in the run report.
    pub collect_results: bool,
    /// Ingestion buffer, in chunks.
    pub channel_capacity: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_interval_ms: 500,
            clock: ClockMode::Auto,
            parallelism: 1,
            end_time_ms: None,
            collect_results: false,
            channel_capacity: 64,
        }
    }
}

/// Output of one trigger.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub trigger_ms: u64,
    /// Stream predicates derived in this batch and relation predicates whose
    /// pane falls on this trigger.
    pub relations: BTreeMap<Value, Relation>,
    pub eval_duration: Duration,
    /// When the last emission of this trigger reached the sink.
    pub emitted_at: Instant,
    /// Lines written to the sink: one per stream record and pane tuple.
    pub output_lines: u64,
}

impl BatchResult {
    pub fn eval_duration_ms(&self) -> f64 {
        self.eval_duration.as_secs_f64() * 1000.0
    }
}

/// Wall-clock time from a fact's arrival to the emission of the batch it
/// contributed to.
pub fn latency_of(batch: &BatchResult, arrival: Instant) -> Duration {
    batch.emitted_at.saturating_duration_since(arrival)
}

/// Trigger times: positive multiples of any of the periods.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerGrid {
    periods: Vec<u64>,
}

impl TriggerGrid {
    pub fn new(periods: impl IntoIterator<Item = u64>) -> Self {
        let mut periods: Vec<u64> = periods.into_iter().filter(|p| *p > 0).collect();
        periods.sort_unstable();
        periods.dedup();
        TriggerGrid { periods }
    }

    pub fn periods(&self) -> &[u64] {
        &self.periods
    }

    /// Smallest grid point strictly after `t`.
    pub fn next_after(&self, t: u64) -> u64 {
        self.periods
            .iter()
            .map(|p| (t / p).saturating_add(1).saturating_mul(*p))
            .min()
            .unwrap_or(u64::MAX)
    }

    /// Smallest grid point at or after `t`.
    pub fn first_at_or_after(&self, t: u64) -> u64 {
        if t == 0 {
            return self.next_after(0);
        }
        self.next_after(t - 1)
    }

    /// Grid points in `(lo, hi]`.
    pub fn between(&self, lo: u64, hi: u64) -> Vec<u64> {
        let mut out = Vec::new();
        let mut t = self.next_after(lo);
        while t <= hi {
            out.push(t);
            t = self.next_after(t);
        }
        out
    }
}

struct WindowBase {
    windows: HashMap<(Value, WindowSpec), Relation>,
}

impl BaseRelations for WindowBase {
    fn relation(&self, predicate: &str, window: Option<WindowSpec>) -> Option<&Relation> {
        let w = window?;
        self.windows.get(&(Value::from(predicate), w))
    }
}

/// Synchronous BSP core: push facts, fire triggers. [`run_bsp`] drives it
/// from a source on background threads.
pub struct BspEngine {
    plan: OperatorPlan,
    store: FactStore,
    ev: Evaluator,
    grid: TriggerGrid,
    pending: VecDeque<Fact>,
    stream_rules: Vec<usize>,
    relation_rules: Vec<usize>,
    /// Base inputs of windowed relation rules.
    window_inputs: BTreeSet<(Value, WindowSpec)>,
    stored: BTreeSet<Value>,
    stream_inputs: BTreeSet<Value>,
    max_length: u64,
    has_windows: bool,
}

impl BspEngine {
    pub fn new(plan: OperatorPlan, config: &BatchConfig) -> Result<Self, EngineError> {
        if config.batch_interval_ms == 0 {
            return Err(EngineError::Config("batch_interval_ms must be positive".into()));
        }
        let slides = plan.slides();
        if let Some(min) = slides.first() {
            if config.batch_interval_ms > *min {
                return Err(EngineError::Config(format!(
                    "batch_interval_ms {} exceeds the smallest slide {min}ms",
                    config.batch_interval_ms
                )));
            }
        }
        let mut periods: Vec<u64> = slides.into_iter().collect();
        if plan.has_stream_outputs() || periods.is_empty() {
            periods.push(config.batch_interval_ms);
        }
        let stream_rules = plan.stream_rules();
        let relation_rules = plan.relation_rules();
        let mut window_inputs = BTreeSet::new();
        let mut max_length = 0;
        let mut has_windows = false;
        for &r in &relation_rules {
            let rule = &plan.program.rules[r];
            if let Some(w) = rule.window {
                has_windows = true;
                max_length = max_length.max(w.length_ms);
                for a in &rule.body {
                    if plan.kind(&a.predicate) != PredicateKind::Relation {
                        window_inputs.insert((a.predicate.clone(), w));
                    }
                }
            }
        }
        let stored = window_inputs.iter().map(|(p, _)| p.clone()).collect();
        let stream_inputs = stream_rules
            .iter()
            .map(|&r| plan.program.rules[r].body[0].predicate.clone())
            .collect();
        Ok(BspEngine {
            ev: Evaluator::with_parallelism(config.parallelism.max(1)),
            plan,
            store: FactStore::new(),
            grid: TriggerGrid::new(periods),
            pending: VecDeque::new(),
            stream_rules,
            relation_rules,
            window_inputs,
            stored,
            stream_inputs,
            max_length,
            has_windows,
        })
    }

    pub fn plan(&self) -> &OperatorPlan {
        &self.plan
    }

    pub fn grid(&self) -> &TriggerGrid {
        &self.grid
    }

    /// Facts currently retained for windows.
    pub fn stored_facts(&self) -> usize {
        self.store.len()
    }

    /// Buffers a fact for the next trigger at or after its timestamp.
    pub fn push(&mut self, fact: Fact) {
        self.pending.push_back(fact);
    }

    /// Ingests buffered facts with timestamp `<= t`, evaluates, writes the
    /// trigger's emissions to `sink` and evicts expired facts.
    pub fn fire(&mut self, t: u64, sink: &mut dyn Sink) -> Result<BatchResult, EngineError> {
        let start = Instant::now();
        let mut batch: HashMap<Value, Vec<(u64, Tuple)>> = HashMap::new();
        while self.pending.front().is_some_and(|f| f.timestamp_ms <= t) {
            let f = self.pending.pop_front().expect("non-empty");
            if self.stream_inputs.contains(&f.atom.predicate) {
                batch
                    .entry(f.atom.predicate.clone())
                    .or_default()
                    .push((f.timestamp_ms, f.atom.args.clone()));
            }
            if self.stored.contains(&f.atom.predicate) {
                self.store.insert(f);
            }
        }

        let mut relations: BTreeMap<Value, Relation> = BTreeMap::new();
        let mut records: Vec<(u64, usize, Value, Tuple)> = Vec::new();
        for &r in &self.stream_rules {
            let rp = &self.plan.rule_plans[r];
            let Some(input) = batch.get(&rp.scans[0].predicate) else {
                relations.entry(rp.head_predicate.clone()).or_default();
                continue;
            };
            let mut derived = Vec::new();
            for (ts, args) in input {
                if let Some(row) = rp.scans[0].apply(args) {
                    derived.push((*ts, rp.project(&row)));
                }
            }
            let head = rp.head_predicate.clone();
            let rel = relations.entry(head.clone()).or_default();
            for (ts, tuple) in &derived {
                rel.insert(tuple.clone());
                let seq = records.len();
                records.push((*ts, seq, head.clone(), tuple.clone()));
                if self.stored.contains(&head) {
                    self.store.insert(Fact::new(
                        crate::model::GroundAtom {
                            predicate: head.clone(),
                            args: tuple.clone(),
                        },
                        *ts,
                    ));
                }
            }
            if self.stream_inputs.contains(&head) {
                batch.entry(head).or_default().extend(derived);
            }
        }

        let emitting: Vec<Value> = self
            .plan
            .emit_slides
            .keys()
            .filter(|p| self.plan.emits_at(p, t))
            .cloned()
            .collect();
        if !emitting.is_empty() {
            let base = WindowBase {
                windows: self
                    .window_inputs
                    .iter()
                    .map(|(p, w)| ((p.clone(), *w), self.store.window_relation(p, *w, t)))
                    .collect(),
            };
            let mut derived = eval_components(
                &self.plan.program,
                &self.plan.sccs,
                &self.relation_rules,
                &base,
                &self.ev,
            );
            for p in emitting {
                relations.insert(p.clone(), derived.remove(&p).unwrap_or_default());
            }
        }
        let eval_duration = start.elapsed();

        records.sort_by_key(|(ts, i, _, _)| (*ts, *i));
        let mut output_lines = records.len() as u64;
        for (ts, _, predicate, tuple) in records {
            sink.emit(&Emission::Record {
                timestamp_ms: ts,
                predicate,
                tuple,
            })
            .map_err(EngineError::Sink)?;
        }
        for (p, rel) in &relations {
            if self.plan.kind(p) == PredicateKind::Relation {
                output_lines += rel.len() as u64;
                sink.emit(&Emission::Pane {
                    trigger_ms: t,
                    predicate: p.clone(),
                    tuples: rel.iter().cloned().collect(),
                })
                .map_err(EngineError::Sink)?;
            }
        }
        sink.flush().map_err(EngineError::Sink)?;
        let emitted_at = Instant::now();

        if !self.has_windows {
            self.store.evict_through(t);
        } else if t >= self.max_length {
            self.store.evict_through(t - self.max_length);
        }
        Ok(BatchResult {
            trigger_ms: t,
            relations,
            eval_duration,
            emitted_at,
            output_lines,
        })
    }
}

enum Msg {
    Facts(Vec<(Fact, Instant)>),
    End(SourceStats),
    Failed(SourceError),
}

fn spawn_ingest<S: StreamSource + 'static>(
    mut source: S,
    chunk: usize,
    capacity: usize,
) -> Result<(Receiver<Msg>, std::thread::JoinHandle<()>), EngineError> {
    let (tx, rx) = channel::bounded(capacity.max(1));
    let handle = std::thread::Builder::new()
        .name("bsp-ingest".into())
        .spawn(move || {
            let mut buf = Vec::with_capacity(chunk);
            loop {
                match source.next_fact() {
                    Ok(Some(f)) => {
                        buf.push((f, Instant::now()));
                        if buf.len() >= chunk && tx.send(Msg::Facts(std::mem::take(&mut buf))).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        if !buf.is_empty() {
                            let _ = tx.send(Msg::Facts(buf));
                        }
                        let _ = tx.send(Msg::End(source.stats()));
                        return;
                    }
                    Err(e) => {
                        let _ = tx.send(Msg::Failed(e));
                        return;
                    }
                }
            }
        })
        .map_err(|e| EngineError::Config(format!("cannot spawn ingestion thread: {e}")))?;
    Ok((rx, handle))
}

struct Loop {
    engine: BspEngine,
    sink: Box<dyn Sink>,
    report: RunReport,
    arrivals: VecDeque<(u64, Instant)>,
    collect: bool,
    last_ts: Option<u64>,
}

impl Loop {
    fn push(&mut self, f: Fact, at: Instant) {
        self.report.records_in += 1;
        self.last_ts = Some(f.timestamp_ms);
        self.arrivals.push_back((f.timestamp_ms, at));
        self.engine.push(f);
    }

    fn fire(&mut self, t: u64) -> Result<(), EngineError> {
        let r = self.engine.fire(t, &mut *self.sink)?;
        let contributing = self.arrivals.iter().take_while(|(ts, _)| *ts <= t).count();
        for (_, at) in self.arrivals.drain(..contributing) {
            self.report.latencies_us.push(latency_of(&r, at).as_micros() as u64);
        }
        self.report.facts_out += r.output_lines;
        self.report.triggers.push(TriggerStats {
            trigger_ms: t,
            eval_duration: r.eval_duration,
            facts_out: r.output_lines,
        });
        if self.collect {
            self.report.batches.push(r);
        }
        Ok(())
    }
}

/// Runs the plan over `source` until it is exhausted. Triggers fire in
/// stream time or wall-clock time (see [`ClockMode`]); a final trigger at
/// the first grid point at or after the last timestamp flushes the run.
pub fn run_bsp<S: StreamSource + 'static>(
    plan: OperatorPlan,
    source: S,
    sink: Box<dyn Sink>,
    config: BatchConfig,
) -> Result<RunHandle, EngineError> {
    let engine = BspEngine::new(plan, &config)?;
    let live = match config.clock {
        ClockMode::Auto => source.epoch().is_some(),
        ClockMode::Stream => false,
        ClockMode::Live => true,
    };
    let epoch = source.epoch();
    RunHandle::spawn("bsp-trigger", move || {
        let started = Instant::now();
        let epoch = epoch.unwrap_or(started);
        let chunk = if live { 1 } else { 1024 };
        let (rx, ingest) = spawn_ingest(source, chunk, config.channel_capacity * if live { 1024 } else { 1 })?;
        let mut lp = Loop {
            engine,
            sink,
            report: RunReport::new(Target::Bsp),
            arrivals: VecDeque::new(),
            collect: config.collect_results,
            last_ts: None,
        };
        let mut next_t = lp.engine.grid.next_after(0);
        let stats = if live {
            live_loop(&mut lp, &rx, epoch, &mut next_t)?
        } else {
            stream_loop(&mut lp, &rx, &mut next_t)?
        };
        let _ = ingest.join();
        let mut final_t = lp.last_ts.map(|ts| lp.engine.grid.first_at_or_after(ts));
        if let Some(end) = config.end_time_ms {
            final_t = Some(final_t.unwrap_or(0).max(end));
        }
        if let Some(final_t) = final_t {
            while next_t <= final_t {
                if live {
                    sleep_until(epoch + Duration::from_millis(next_t));
                }
                lp.fire(next_t)?;
                next_t = lp.engine.grid.next_after(next_t);
            }
        }
        lp.sink.flush().map_err(EngineError::Sink)?;
        lp.report.records_in = lp.report.records_in.max(stats.emitted);
        lp.report.skipped = stats.skipped;
        lp.report.wall_duration = started.elapsed();
        Ok(lp.report)
    })
}

fn stream_loop(lp: &mut Loop, rx: &Receiver<Msg>, next_t: &mut u64) -> Result<SourceStats, EngineError> {
    loop {
        match rx.recv() {
            Ok(Msg::Facts(facts)) => {
                for (f, at) in facts {
                    while f.timestamp_ms > *next_t {
                        lp.fire(*next_t)?;
                        *next_t = lp.engine.grid.next_after(*next_t);
                    }
                    lp.push(f, at);
                }
            }
            Ok(Msg::End(stats)) => return Ok(stats),
            Ok(Msg::Failed(e)) => return Err(e.into()),
            Err(_) => return Err(EngineError::Panicked("ingestion thread exited".into())),
        }
    }
}

fn live_loop(lp: &mut Loop, rx: &Receiver<Msg>, epoch: Instant, next_t: &mut u64) -> Result<SourceStats, EngineError> {
    let handle = |lp: &mut Loop, msg: Msg| -> Result<Option<SourceStats>, EngineError> {
        match msg {
            Msg::Facts(facts) => {
                for (f, at) in facts {
                    lp.push(f, at);
                }
                Ok(None)
            }
            Msg::End(stats) => Ok(Some(stats)),
            Msg::Failed(e) => Err(e.into()),
        }
    };
    loop {
        let deadline = epoch + Duration::from_millis(*next_t);
        match rx.recv_deadline(deadline) {
            Ok(msg) => {
                if let Some(stats) = handle(lp, msg)? {
                    return Ok(stats);
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                loop {
                    match rx.try_recv() {
                        Ok(msg) => {
                            if let Some(stats) = handle(lp, msg)? {
                                return Ok(stats);
                            }
                        }
                        Err(TryRecvError::Empty) => break,
                        Err(TryRecvError::Disconnected) => {
                            return Err(EngineError::Panicked("ingestion thread exited".into()))
                        }
                    }
                }
                lp.fire(*next_t)?;
                *next_t = lp.engine.grid.next_after(*next_t);
            }
            Err(RecvTimeoutError::Disconnected) => return Err(EngineError::Panicked("ingestion thread exited".into())),
        }
    }
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}
