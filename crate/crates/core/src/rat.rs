//! Record-at-a-time execution: the operator DAG runs as long-lived tasks
//! connected by bounded channels.
//!
//! Stateless operators (select, window, project, union) are fused into the
//! task that produces their input. Joins and distincts run as `parallelism`
//! hash partitions each; a single sink task writes output. Every record
//! carries the half-open validity interval `[lo, hi)` of trigger times whose
//! pane it belongs to: a window of length `l` turns a fact at `ts` into
//! `[ts, ts + l)`, and a join intersects the intervals of its inputs.
//! Slide-trigger punctuations flow through every channel; a task acts on one
//! once it has arrived from all of its upstream tasks.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam::channel::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};

use crate::bsp::{ClockMode, TriggerGrid};
use crate::engine::{panic_message, EngineError, RunHandle, RunReport, TriggerStats};
use crate::model::{Fact, Tuple, Value};
use crate::plan::{NodeId, OpKind, OperatorPlan, PredicateKind, Target};
use crate::stream_io::{Emission, Sink, SourceError, SourceStats, StreamSource};

/// What the sink writes for relation predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SinkMode {
    /// Each new derivation as soon as it is made.
    Eager,
    /// The finalized pane at every slide trigger.
    #[default]
    Pane,
}

impl FromStr for SinkMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "eager" => Ok(SinkMode::Eager),
            "pane" => Ok(SinkMode::Pane),
            _ => Err(format!("unknown sink mode `{s}`: expected eager or pane")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatConfig {
    /// Partitions per stateful operator.
    pub parallelism: usize,
    pub channel_capacity: usize,
    pub sink_mode: SinkMode,
    pub clock: ClockMode,
    /// Keep firing triggers up to this stream time after the source ends.
    pub end_time_ms: Option<u64>,
}

impl Default for RatConfig {
    fn default() -> Self {
        RatConfig {
            parallelism: 1,
            channel_capacity: 1024,
            sink_mode: SinkMode::Pane,
            clock: ClockMode::Auto,
            end_time_ms: None,
        }
    }
}

/// Microseconds between a record entering the system and its output.
pub fn record_latency(record_in: Instant, record_out: Instant) -> u64 {
    record_out.saturating_duration_since(record_in).as_micros() as u64
}

#[derive(Debug, Clone)]
struct Rec {
    tuple: Tuple,
    lo: u64,
    hi: u64,
    birth: Instant,
}

#[derive(Debug, Clone, Copy)]
enum Punct {
    Trigger { t: u64, next: u64, created: Instant },
    End,
}

enum Msg {
    Data {
        node: NodeId,
        port: usize,
        rec: Rec,
    },
    /// One distinct partition's share of a pane.
    Pane {
        predicate: Value,
        t: u64,
        tuples: Vec<Tuple>,
    },
    Punct(Punct),
}

/// Where a record leaving a fused pipeline goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Route {
    Stateful { node: NodeId, port: usize },
    Sink { node: NodeId },
}

struct Topology {
    plan: OperatorPlan,
    consumers: Vec<Vec<NodeId>>,
    parallelism: usize,
    sink_mode: SinkMode,
    grid: TriggerGrid,
}

impl Topology {
    fn is_task(&self, id: NodeId) -> bool {
        matches!(self.plan.nodes[id].kind, OpKind::Join { .. } | OpKind::Distinct { .. })
    }

    /// Stateful nodes reachable from `from` through stateless operators.
    fn reachable(&self, from: NodeId, out: &mut BTreeSet<Route>) {
        for &c in &self.consumers[from] {
            for (port, _) in self.plan.nodes[c].inputs.iter().enumerate().filter(|(_, &i)| i == from) {
                match self.plan.nodes[c].kind {
                    OpKind::Sink { .. } => {
                        out.insert(Route::Sink { node: c });
                    }
                    OpKind::Join { .. } | OpKind::Distinct { .. } => {
                        out.insert(Route::Stateful { node: c, port });
                    }
                    _ => self.reachable(c, out),
                }
            }
        }
    }
}

fn partition_of<T: Hash + ?Sized>(value: &T, parts: usize) -> usize {
    if parts <= 1 {
        return 0;
    }
    let mut h = DefaultHasher::new();
    value.hash(&mut h);
    (h.finish() % parts as u64) as usize
}

/// Channels a task writes to.
#[derive(Clone)]
struct Router {
    topo: Arc<Topology>,
    tasks: Arc<HashMap<NodeId, Vec<Sender<Msg>>>>,
    sink: Sender<Msg>,
}

struct Closed;

impl Router {
    /// Pushes `rec`, the output of node `from`, through the fused stateless
    /// operators downstream of it.
    fn forward(&self, from: NodeId, rec: Rec) -> Result<(), Closed> {
        let topo = &*self.topo;
        let consumers = &topo.consumers[from];
        for &c in consumers {
            let node = &topo.plan.nodes[c];
            for port in 0..node.inputs.len() {
                if node.inputs[port] == from {
                    self.deliver(c, port, rec.clone())?;
                }
            }
        }
        Ok(())
    }

    fn deliver(&self, c: NodeId, port: usize, mut rec: Rec) -> Result<(), Closed> {
        let topo = &*self.topo;
        match &topo.plan.nodes[c].kind {
            OpKind::Select { scan } => match scan.apply(&rec.tuple) {
                Some(t) => {
                    rec.tuple = t;
                    self.forward(c, rec)
                }
                None => Ok(()),
            },
            OpKind::Window(w) => {
                rec.hi = rec.lo.saturating_add(w.length_ms);
                if rec.lo < rec.hi {
                    self.forward(c, rec)
                } else {
                    Ok(())
                }
            }
            OpKind::Project { head, .. } => {
                rec.tuple = head
                    .iter()
                    .map(|h| match h {
                        crate::plan::HeadTerm::Column(i) => rec.tuple[*i].clone(),
                        crate::plan::HeadTerm::Constant(v) => v.clone(),
                    })
                    .collect();
                self.forward(c, rec)
            }
            OpKind::Union { .. } => self.forward(c, rec),
            OpKind::Join { step } => {
                let key = if port == 0 {
                    step.left_key(&rec.tuple)
                } else {
                    step.right_key(&rec.tuple)
                };
                let part = partition_of(&key, topo.parallelism);
                self.tasks[&c][part]
                    .send(Msg::Data { node: c, port, rec })
                    .map_err(|_| Closed)
            }
            OpKind::Distinct { .. } => {
                let part = partition_of(&rec.tuple, topo.parallelism);
                self.tasks[&c][part]
                    .send(Msg::Data { node: c, port, rec })
                    .map_err(|_| Closed)
            }
            OpKind::Sink { predicate } => {
                if topo.plan.kind(predicate) == PredicateKind::Relation && topo.sink_mode == SinkMode::Pane {
                    return Ok(());
                }
                self.sink.send(Msg::Data { node: c, port, rec }).map_err(|_| Closed)
            }
            other => unreachable!("operator {other:?} in a record-at-a-time plan"),
        }
    }

    /// Sends a punctuation to every partition of `targets`, and to the sink.
    fn broadcast(&self, targets: &BTreeSet<NodeId>, p: Punct) -> Result<(), Closed> {
        for n in targets {
            for tx in &self.tasks[n] {
                tx.send(Msg::Punct(p)).map_err(|_| Closed)?;
            }
        }
        self.sink.send(Msg::Punct(p)).map_err(|_| Closed)
    }
}

/// Counts punctuations until every upstream task has sent one.
struct Aligner {
    upstream: usize,
    triggers: BTreeMap<u64, usize>,
    ends: usize,
}

impl Aligner {
    fn new(upstream: usize) -> Self {
        Aligner {
            upstream,
            triggers: BTreeMap::new(),
            ends: 0,
        }
    }

    /// Returns the punctuation to act on, once aligned.
    fn observe(&mut self, p: Punct) -> Option<Punct> {
        match p {
            Punct::Trigger { t, .. } => {
                let n = self.triggers.entry(t).or_default();
                *n += 1;
                if *n == self.upstream {
                    self.triggers.remove(&t);
                    return Some(p);
                }
                None
            }
            Punct::End => {
                self.ends += 1;
                (self.ends == self.upstream).then_some(Punct::End)
            }
        }
    }
}

struct TaskSpec {
    node: NodeId,
    partition: usize,
    rx: Receiver<Msg>,
    upstream: usize,
    /// Task nodes downstream of this one (punctuation targets).
    targets: BTreeSet<NodeId>,
}

fn join_task(spec: TaskSpec, router: Router) {
    let OpKind::Join { step } = router.topo.plan.nodes[spec.node].kind.clone() else {
        unreachable!()
    };
    let mut sides: [HashMap<Tuple, Vec<Rec>>; 2] = [HashMap::new(), HashMap::new()];
    let mut align = Aligner::new(spec.upstream);
    for msg in spec.rx.iter() {
        match msg {
            Msg::Data { port, rec, .. } => {
                let key = if port == 0 {
                    step.left_key(&rec.tuple)
                } else {
                    step.right_key(&rec.tuple)
                };
                if let Some(matches) = sides[1 - port].get(&key) {
                    for other in matches {
                        let lo = rec.lo.max(other.lo);
                        let hi = rec.hi.min(other.hi);
                        if lo >= hi {
                            continue;
                        }
                        let (l, r) = if port == 0 { (&rec, other) } else { (other, &rec) };
                        let out = Rec {
                            tuple: step.combine(&l.tuple, &r.tuple),
                            lo,
                            hi,
                            birth: rec.birth.max(other.birth),
                        };
                        if router.forward(spec.node, out).is_err() {
                            return;
                        }
                    }
                }
                sides[port].entry(key).or_default().push(rec);
            }
            Msg::Punct(p) => match align.observe(p) {
                Some(p @ Punct::Trigger { next, .. }) => {
                    for side in &mut sides {
                        side.retain(|_, recs| {
                            recs.retain(|r| r.hi > next);
                            !recs.is_empty()
                        });
                    }
                    if router.broadcast(&spec.targets, p).is_err() {
                        return;
                    }
                }
                Some(Punct::End) => {
                    let _ = router.broadcast(&spec.targets, Punct::End);
                    return;
                }
                None => {}
            },
            Msg::Pane { .. } => unreachable!("pane sent to a join"),
        }
    }
}

fn distinct_task(spec: TaskSpec, router: Router) {
    let OpKind::Distinct { predicate } = router.topo.plan.nodes[spec.node].kind.clone() else {
        unreachable!()
    };
    let mut seen: HashMap<Tuple, Vec<(u64, u64)>> = HashMap::new();
    let mut align = Aligner::new(spec.upstream);
    for msg in spec.rx.iter() {
        match msg {
            Msg::Data { rec, .. } => {
                let intervals = seen.entry(rec.tuple.clone()).or_default();
                if intervals.iter().any(|&(lo, hi)| lo <= rec.lo && rec.hi <= hi) {
                    continue;
                }
                intervals.retain(|&(lo, hi)| !(rec.lo <= lo && hi <= rec.hi));
                intervals.push((rec.lo, rec.hi));
                if router.forward(spec.node, rec).is_err() {
                    return;
                }
            }
            Msg::Punct(p) => match align.observe(p) {
                Some(p @ Punct::Trigger { t, next, .. }) => {
                    if router.topo.plan.emits_at(&predicate, t) {
                        let tuples: Vec<Tuple> = seen
                            .iter()
                            .filter(|(_, iv)| iv.iter().any(|&(lo, hi)| lo <= t && t < hi))
                            .map(|(tuple, _)| tuple.clone())
                            .collect();
                        let pane = Msg::Pane {
                            predicate: predicate.clone(),
                            t,
                            tuples,
                        };
                        if router.sink.send(pane).is_err() {
                            return;
                        }
                    }
                    seen.retain(|_, iv| {
                        iv.retain(|&(_, hi)| hi > next);
                        !iv.is_empty()
                    });
                    if router.broadcast(&spec.targets, p).is_err() {
                        return;
                    }
                }
                Some(Punct::End) => {
                    let _ = router.broadcast(&spec.targets, Punct::End);
                    return;
                }
                None => {}
            },
            Msg::Pane { .. } => unreachable!("pane sent to a distinct"),
        }
    }
}

struct SinkOutcome {
    facts_out: u64,
    latencies_us: Vec<u64>,
    triggers: Vec<TriggerStats>,
}

fn sink_task(
    rx: Receiver<Msg>,
    upstream: usize,
    topo: Arc<Topology>,
    sink: &mut dyn Sink,
) -> Result<SinkOutcome, EngineError> {
    let mut out = SinkOutcome {
        facts_out: 0,
        latencies_us: Vec::new(),
        triggers: Vec::new(),
    };
    let mut align = Aligner::new(upstream);
    let mut panes: BTreeMap<u64, BTreeMap<Value, BTreeSet<Tuple>>> = BTreeMap::new();
    for msg in rx.iter() {
        match msg {
            Msg::Data { node, rec, .. } => {
                let OpKind::Sink { predicate } = &topo.plan.nodes[node].kind else {
                    unreachable!()
                };
                sink.emit(&Emission::Record {
                    timestamp_ms: rec.lo,
                    predicate: predicate.clone(),
                    tuple: rec.tuple,
                })
                .map_err(EngineError::Sink)?;
                out.facts_out += 1;
                out.latencies_us.push(record_latency(rec.birth, Instant::now()));
            }
            Msg::Pane { predicate, t, tuples } => {
                panes.entry(t).or_default().entry(predicate).or_default().extend(tuples);
            }
            Msg::Punct(p) => match align.observe(p) {
                Some(Punct::Trigger { t, created, .. }) => {
                    let mut lines = 0;
                    let mut ready = panes.remove(&t).unwrap_or_default();
                    if topo.sink_mode == SinkMode::Pane {
                        for p in topo.plan.emit_slides.keys() {
                            if topo.plan.emits_at(p, t) {
                                ready.entry(p.clone()).or_default();
                            }
                        }
                        for (predicate, tuples) in ready {
                            lines += tuples.len() as u64;
                            sink.emit(&Emission::Pane {
                                trigger_ms: t,
                                predicate,
                                tuples: tuples.into_iter().collect(),
                            })
                            .map_err(EngineError::Sink)?;
                        }
                    }
                    sink.flush().map_err(EngineError::Sink)?;
                    out.facts_out += lines;
                    out.triggers.push(TriggerStats {
                        trigger_ms: t,
                        eval_duration: created.elapsed(),
                        facts_out: lines,
                    });
                }
                Some(Punct::End) => break,
                None => {}
            },
        }
    }
    sink.flush().map_err(EngineError::Sink)?;
    Ok(out)
}

enum Ingest {
    Facts(Vec<(Fact, Instant)>),
    End(SourceStats),
    Failed(SourceError),
}

struct SourceTask {
    router: Router,
    targets: BTreeSet<NodeId>,
    source_nodes: HashMap<Value, NodeId>,
    records_in: u64,
    last_ts: Option<u64>,
    next_t: u64,
}

impl SourceTask {
    fn punct(&mut self) -> Result<(), Closed> {
        let t = self.next_t;
        let next = self.router.topo.grid.next_after(t);
        self.router.broadcast(
            &self.targets,
            Punct::Trigger {
                t,
                next,
                created: Instant::now(),
            },
        )?;
        self.next_t = next;
        Ok(())
    }

    fn fact(&mut self, f: Fact, at: Instant) -> Result<(), Closed> {
        self.records_in += 1;
        self.last_ts = Some(f.timestamp_ms);
        if let Some(&node) = self.source_nodes.get(&f.atom.predicate) {
            self.router.forward(
                node,
                Rec {
                    tuple: f.atom.args,
                    lo: f.timestamp_ms,
                    hi: u64::MAX,
                    birth: at,
                },
            )?;
        }
        Ok(())
    }
}

/// Starts a record-at-a-time run of `plan` over `source`.
pub fn run_rat<S: StreamSource + 'static>(
    plan: OperatorPlan,
    source: S,
    sink: Box<dyn Sink>,
    config: RatConfig,
) -> Result<RunHandle, EngineError> {
    if let Some(OpKind::Fixpoint { scc, predicates, .. }) = plan
        .nodes
        .iter()
        .map(|n| &n.kind)
        .find(|k| matches!(k, OpKind::Fixpoint { .. }))
    {
        let names: Vec<&str> = predicates.iter().map(|p| &**p).collect();
        return Err(EngineError::Plan(format!(
            "recursive SCC #{scc} {{{}}} cannot run record-at-a-time",
            names.join(", ")
        )));
    }
    if config.parallelism == 0 {
        return Err(EngineError::Config("parallelism must be positive".into()));
    }
    if config.channel_capacity == 0 {
        return Err(EngineError::Config("channel_capacity must be positive".into()));
    }
    let live = match config.clock {
        ClockMode::Auto => source.epoch().is_some(),
        ClockMode::Stream => false,
        ClockMode::Live => true,
    };
    let epoch = source.epoch();
    RunHandle::spawn("rat", move || execute(plan, source, sink, config, live, epoch))
}

fn execute<S: StreamSource + 'static>(
    plan: OperatorPlan,
    source: S,
    mut sink: Box<dyn Sink>,
    config: RatConfig,
    live: bool,
    epoch: Option<Instant>,
) -> Result<RunReport, EngineError> {
    let started = Instant::now();
    let epoch = epoch.unwrap_or(started);
    let p = config.parallelism;
    let topo = Arc::new(Topology {
        consumers: plan.consumers(),
        grid: TriggerGrid::new(plan.slides()),
        plan,
        parallelism: p,
        sink_mode: config.sink_mode,
    });

    let task_nodes: Vec<NodeId> = (0..topo.plan.nodes.len()).filter(|&n| topo.is_task(n)).collect();
    let source_nodes: HashMap<Value, NodeId> = topo
        .plan
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            OpKind::Source { predicate } => Some((predicate.clone(), n.id)),
            _ => None,
        })
        .collect();

    // Punctuation targets per producer, and upstream task counts.
    let targets_of = |from: &[NodeId]| -> (BTreeSet<NodeId>, bool) {
        let mut reach = BTreeSet::new();
        for &n in from {
            topo.reachable(n, &mut reach);
        }
        let mut tasks = BTreeSet::new();
        let mut sink = false;
        for t in reach {
            match t {
                Route::Stateful { node, .. } => {
                    tasks.insert(node);
                }
                Route::Sink { .. } => sink = true,
            }
        }
        (tasks, sink)
    };
    let mut upstream: HashMap<NodeId, usize> = task_nodes.iter().map(|&n| (n, 0)).collect();
    let source_list: Vec<NodeId> = source_nodes.values().copied().collect();
    let (source_targets, _) = targets_of(&source_list);
    for n in &source_targets {
        *upstream.get_mut(n).expect("task node") += 1;
    }
    // The source always punctuates the sink directly.
    let mut sink_upstream = 1;
    let mut task_targets = HashMap::new();
    for &n in &task_nodes {
        let (targets, _) = targets_of(&[n]);
        for t in &targets {
            *upstream.get_mut(t).expect("task node") += p;
        }
        task_targets.insert(n, targets);
        sink_upstream += p;
    }

    let (sink_tx, sink_rx) = channel::bounded(config.channel_capacity);
    let mut senders: HashMap<NodeId, Vec<Sender<Msg>>> = HashMap::new();
    let mut specs = Vec::new();
    for &n in &task_nodes {
        for part in 0..p {
            let (tx, rx) = channel::bounded(config.channel_capacity);
            senders.entry(n).or_default().push(tx);
            specs.push(TaskSpec {
                node: n,
                partition: part,
                rx,
                upstream: upstream[&n],
                targets: task_targets[&n].clone(),
            });
        }
    }
    let router = Router {
        topo: topo.clone(),
        tasks: Arc::new(senders),
        sink: sink_tx,
    };

    let (ingest_tx, ingest_rx) = channel::bounded::<Ingest>(if live { 65_536 } else { 64 });
    let chunk = if live { 1 } else { 1024 };

    std::thread::scope(|scope| {
        let ingest = std::thread::Builder::new()
            .name("rat-ingest".into())
            .spawn_scoped(scope, move || {
                let mut source = source;
                let mut buf = Vec::with_capacity(chunk);
                loop {
                    match source.next_fact() {
                        Ok(Some(f)) => {
                            buf.push((f, Instant::now()));
                            if buf.len() >= chunk && ingest_tx.send(Ingest::Facts(std::mem::take(&mut buf))).is_err() {
                                return;
                            }
                        }
                        Ok(None) => {
                            if !buf.is_empty() {
                                let _ = ingest_tx.send(Ingest::Facts(buf));
                            }
                            let _ = ingest_tx.send(Ingest::End(source.stats()));
                            return;
                        }
                        Err(e) => {
                            let _ = ingest_tx.send(Ingest::Failed(e));
                            return;
                        }
                    }
                }
            })
            .map_err(|e| EngineError::Config(format!("cannot spawn ingestion thread: {e}")))?;

        let mut workers = Vec::new();
        for spec in specs {
            let r = router.clone();
            let is_join = matches!(topo.plan.nodes[spec.node].kind, OpKind::Join { .. });
            let name = format!("rat-n{}-p{}", spec.node, spec.partition);
            let h = std::thread::Builder::new()
                .name(name)
                .spawn_scoped(scope, move || {
                    if is_join {
                        join_task(spec, r)
                    } else {
                        distinct_task(spec, r)
                    }
                })
                .map_err(|e| EngineError::Config(format!("cannot spawn task: {e}")))?;
            workers.push(h);
        }

        let sink_topo = topo.clone();
        let sink_ref = &mut sink;
        let sink_handle = std::thread::Builder::new()
            .name("rat-sink".into())
            .spawn_scoped(scope, move || {
                sink_task(sink_rx, sink_upstream, sink_topo, &mut **sink_ref)
            })
            .map_err(|e| EngineError::Config(format!("cannot spawn sink: {e}")))?;

        let mut src = SourceTask {
            router,
            targets: source_targets,
            source_nodes,
            records_in: 0,
            last_ts: None,
            next_t: topo.grid.next_after(0),
        };
        let source_result = drive_source(&mut src, &ingest_rx, live, epoch, config.end_time_ms, &topo.grid);
        let records_in = src.records_in;
        drop(src);
        drop(ingest_rx);

        let _ = ingest.join();
        for w in workers {
            if let Err(p) = w.join() {
                return Err(EngineError::Panicked(panic_message(p)));
            }
        }
        let sink_out = sink_handle
            .join()
            .unwrap_or_else(|p| Err(EngineError::Panicked(panic_message(p))));
        let stats = source_result?;
        let sink_out = sink_out?;
        let mut report = RunReport::new(Target::Rat);
        report.records_in = records_in;
        report.skipped = stats.skipped;
        report.facts_out = sink_out.facts_out;
        report.latencies_us = sink_out.latencies_us;
        report.triggers = sink_out.triggers;
        report.wall_duration = started.elapsed();
        Ok(report)
    })
}

fn drive_source(
    src: &mut SourceTask,
    rx: &Receiver<Ingest>,
    live: bool,
    epoch: Instant,
    end_time_ms: Option<u64>,
    grid: &TriggerGrid,
) -> Result<SourceStats, EngineError> {
    let closed = || EngineError::Panicked("a downstream task stopped early".into());
    let has_triggers = !grid.periods().is_empty();
    let stats = loop {
        let msg = if live && has_triggers {
            match rx.recv_deadline(epoch + Duration::from_millis(src.next_t)) {
                Ok(m) => m,
                Err(RecvTimeoutError::Timeout) => {
                    let mut ended = None;
                    loop {
                        match rx.try_recv() {
                            Ok(Ingest::Facts(fs)) => {
                                for (f, at) in fs {
                                    src.fact(f, at).map_err(|_| closed())?;
                                }
                            }
                            Ok(Ingest::End(s)) => {
                                ended = Some(s);
                                break;
                            }
                            Ok(Ingest::Failed(e)) => {
                                let _ = src.router.broadcast(&src.targets, Punct::End);
                                return Err(e.into());
                            }
                            Err(TryRecvError::Empty) => break,
                            Err(TryRecvError::Disconnected) => {
                                return Err(EngineError::Panicked("ingestion thread exited".into()))
                            }
                        }
                    }
                    if let Some(s) = ended {
                        break s;
                    }
                    src.punct().map_err(|_| closed())?;
                    continue;
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(EngineError::Panicked("ingestion thread exited".into()))
                }
            }
        } else {
            rx.recv()
                .map_err(|_| EngineError::Panicked("ingestion thread exited".into()))?
        };
        match msg {
            Ingest::Facts(fs) => {
                for (f, at) in fs {
                    if !live {
                        while has_triggers && f.timestamp_ms > src.next_t {
                            src.punct().map_err(|_| closed())?;
                        }
                    }
                    src.fact(f, at).map_err(|_| closed())?;
                }
            }
            Ingest::End(s) => break s,
            Ingest::Failed(e) => {
                let _ = src.router.broadcast(&src.targets, Punct::End);
                return Err(e.into());
            }
        }
    };
    if has_triggers {
        let mut final_t = src.last_ts.map(|ts| grid.first_at_or_after(ts));
        if let Some(end) = end_time_ms {
            final_t = Some(final_t.unwrap_or(0).max(end));
        }
        if let Some(final_t) = final_t {
            while src.next_t <= final_t {
                if live {
                    let due = epoch + Duration::from_millis(src.next_t);
                    let now = Instant::now();
                    if due > now {
                        std::thread::sleep(due - now);
                    }
                }
                src.punct().map_err(|_| closed())?;
            }
        }
    }
    src.router.broadcast(&src.targets, Punct::End).map_err(|_| closed())?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsp::{run_bsp, BatchConfig};
    use crate::model::{tuple, GroundAtom};
    use crate::parser::parse_program;
    use crate::stream_io::{MemorySink, VecSource};

    const LISTING: &str = r#"resIRI(Obs,Sen) :- procedure(Obs,Sen), type(Obs,"rainObs") [window 10s slide 2s]."#;

    fn plan(src: &str, target: Target) -> Result<OperatorPlan, crate::plan::CompileError> {
        OperatorPlan::build(&parse_program(src).unwrap(), target)
    }

    fn fact(p: &str, s: &str, o: &str, ts: u64) -> Fact {
        Fact::new(GroundAtom::new(p, &[s, o]), ts)
    }

    fn run(src: &str, facts: Vec<Fact>, config: RatConfig) -> (RunReport, Vec<Emission>) {
        let mem = MemorySink::new();
        let report = run_rat(
            plan(src, Target::Rat).unwrap(),
            VecSource::new(facts),
            Box::new(mem.clone()),
            config,
        )
        .unwrap()
        .join()
        .unwrap();
        (report, mem.emissions())
    }

    #[test]
    fn stateless_filter() {
        let (report, out) = run(
            r#"p(X) :- q(X,"c")."#,
            vec![fact("q", "a", "c", 1), fact("q", "a", "d", 2)],
            RatConfig::default(),
        );
        assert_eq!(
            out,
            [Emission::Record {
                timestamp_ms: 1,
                predicate: "p".into(),
                tuple: tuple(&["a"])
            }]
        );
        assert_eq!(report.records_in, 2);
        assert_eq!(report.latencies_us.len(), 1);
    }

    #[test]
    fn listing_pane() {
        let facts = vec![fact("procedure", "o1", "s1", 1000), fact("type", "o1", "rainObs", 3000)];
        let (_, out) = run(LISTING, facts.clone(), RatConfig::default());
        let panes: Vec<(u64, usize)> = out.iter().map(|e| (e.time_ms(), e.len())).collect();
        assert_eq!(panes, [(2000, 0), (4000, 1)]);

        let (_, eager) = run(
            LISTING,
            facts,
            RatConfig {
                sink_mode: SinkMode::Eager,
                ..Default::default()
            },
        );
        assert_eq!(
            eager,
            [Emission::Record {
                timestamp_ms: 3000,
                predicate: "resIRI".into(),
                tuple: tuple(&["o1", "s1"])
            }]
        );
    }

    #[test]
    fn pane_contents_follow_window() {
        let facts = vec![fact("procedure", "o1", "s1", 1000), fact("type", "o1", "rainObs", 3000)];
        let (_, out) = run(
            LISTING,
            facts,
            RatConfig {
                end_time_ms: Some(16_000),
                ..Default::default()
            },
        );
        let sizes: Vec<(u64, usize)> = out.iter().map(|e| (e.time_ms(), e.len())).collect();
        // procedure(o1,s1)@1s leaves the window after t = 10s.
        assert_eq!(
            sizes,
            [
                (2000, 0),
                (4000, 1),
                (6000, 1),
                (8000, 1),
                (10_000, 1),
                (12_000, 0),
                (14_000, 0),
                (16_000, 0)
            ]
        );
    }

    #[test]
    fn recursion_is_rejected() {
        let tc = "reach(X,Y) :- edge(X,Y) [window 10s].\nreach(X,Z) :- reach(X,Y), edge(Y,Z) [window 10s].";
        assert!(plan(tc, Target::Rat).is_err());
        let bsp_plan = plan(tc, Target::Bsp).unwrap();
        let err = run_rat(
            bsp_plan,
            VecSource::new(vec![]),
            Box::new(MemorySink::new()),
            RatConfig::default(),
        )
        .err()
        .unwrap();
        assert!(matches!(err, EngineError::Plan(_)));
        assert!(err.to_string().contains("reach"));
    }

    #[test]
    fn matches_bsp_across_parallelism() {
        let src = "j(X,Z) :- e(X,Y), e(Y,Z) [window 3s slide 1s].\nk(X) :- j(X,X).";
        let mut facts = Vec::new();
        for i in 0..60u64 {
            facts.push(fact(
                "e",
                &format!("n{}", i % 7),
                &format!("n{}", (i * 3) % 7),
                i * 150 + 1,
            ));
        }
        let mem = MemorySink::new();
        let cfg = BatchConfig {
            batch_interval_ms: 1000,
            ..Default::default()
        };
        run_bsp(
            plan(src, Target::Bsp).unwrap(),
            VecSource::new(facts.clone()),
            Box::new(mem.clone()),
            cfg,
        )
        .unwrap()
        .join()
        .unwrap();
        let expected = mem.emissions();
        assert!(expected.iter().any(|e| !e.is_empty()));
        for p in [1, 2, 4] {
            let (_, out) = run(
                src,
                facts.clone(),
                RatConfig {
                    parallelism: p,
                    ..Default::default()
                },
            );
            assert_eq!(out, expected, "parallelism {p}");
        }
    }
}
