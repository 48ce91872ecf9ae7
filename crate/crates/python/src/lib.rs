//! Python bindings: parse, validate, explain and run programs.

use std::collections::HashMap;

use larstream::eval::{eval_stratified, naive_fixpoint};
use larstream::model::{Fact, GroundAtom, Relation, Snapshot, Value, WindowSpec};
use larstream::plan::{build_dep_graph, scc_plan};
use larstream::stream_io::{self, Emission, MemorySink, VecSource, Workload};
use larstream::{
    explain, format_program, parse_program, start, window_contents, EngineConfig, FactStore, OperatorPlan, Program,
    SinkMode, Target,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

type PyFact = (String, String, String, u64);
type PyRelations = HashMap<String, Vec<Vec<String>>>;

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_facts(facts: Vec<PyFact>) -> Vec<Fact> {
    facts
        .into_iter()
        .map(|(s, p, o, ts)| Fact::new(GroundAtom::new(&p, &[&s, &o]), ts))
        .collect()
}

fn to_snapshot(rels: PyRelations) -> Snapshot {
    rels.into_iter()
        .map(|(p, rows)| {
            let rel: Relation = rows
                .into_iter()
                .map(|r| r.iter().map(|v| Value::from(v.as_str())).collect())
                .collect();
            (Value::from(p.as_str()), rel)
        })
        .collect()
}

fn from_snapshot(s: Snapshot) -> PyRelations {
    s.into_iter()
        .map(|(p, rel)| {
            let rows = rel
                .into_tuples()
                .into_iter()
                .map(|t| t.iter().map(|v| v.to_string()).collect())
                .collect();
            (p.to_string(), rows)
        })
        .collect()
}

/// A parsed and validated program.
#[pyclass(name = "Program", frozen)]
struct PyProgram {
    inner: Program,
}

/// Output and metrics of one engine run.
#[pyclass(name = "RunOutput", frozen, get_all)]
struct RunOutput {
    /// `(time_ms, predicate, args)` per output line, in emission order.
    output: Vec<(u64, String, Vec<String>)>,
    records_in: u64,
    facts_out: u64,
    wall_ms: f64,
    throughput_tps: f64,
    latency_p50_us: Option<u64>,
    triggers: Vec<u64>,
}

#[pymethods]
impl PyProgram {
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        parse_program(text).map(|inner| PyProgram { inner }).map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.rules.len()
    }

    fn __str__(&self) -> String {
        format_program(&self.inner)
    }

    /// Canonical text form.
    fn format(&self) -> String {
        format_program(&self.inner)
    }

    #[getter]
    fn edb(&self) -> Vec<String> {
        self.inner.edb_predicates.iter().map(|p| p.to_string()).collect()
    }

    #[getter]
    fn idb(&self) -> Vec<String> {
        self.inner.idb_predicates.iter().map(|p| p.to_string()).collect()
    }

    #[pyo3(signature = (engine = "bsp"))]
    fn explain(&self, engine: &str) -> PyResult<String> {
        let target: Target = engine.parse().map_err(value_err)?;
        let plan = OperatorPlan::build(&self.inner, target).map_err(value_err)?;
        Ok(explain(&plan))
    }

    /// Evaluates the rules once over static relations, ignoring windows.
    #[pyo3(signature = (relations, naive = false))]
    fn evaluate(&self, relations: PyRelations, naive: bool) -> PyRelations {
        let snap = to_snapshot(relations);
        let out = if naive {
            naive_fixpoint(&self.inner.rules, &snap)
        } else {
            let sccs = scc_plan(&build_dep_graph(&self.inner), &self.inner);
            eval_stratified(&self.inner, &sccs, &snap)
        };
        from_snapshot(out)
    }

    /// Runs the program over `(subject, predicate, object, timestamp_ms)`
    /// facts in stream time.
    #[pyo3(signature = (facts, engine = "bsp", batch_interval_ms = 500, parallelism = 1, end_time_ms = None, sink_mode = "pane"))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        py: Python<'_>,
        facts: Vec<PyFact>,
        engine: &str,
        batch_interval_ms: u64,
        parallelism: usize,
        end_time_ms: Option<u64>,
        sink_mode: &str,
    ) -> PyResult<RunOutput> {
        let target: Target = engine.parse().map_err(value_err)?;
        let sink_mode: SinkMode = sink_mode.parse().map_err(value_err)?;
        let plan = OperatorPlan::build(&self.inner, target).map_err(value_err)?;
        let config = EngineConfig {
            engine: target,
            batch_interval_ms,
            parallelism,
            sink_mode,
            end_time_ms,
            ..EngineConfig::default()
        };
        let facts = to_facts(facts);
        let mem = MemorySink::new();
        let sink = mem.clone();
        let report = py
            .detach(move || start(plan, VecSource::new(facts), Box::new(sink), &config).and_then(|h| h.join()))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let mut output = Vec::new();
        for e in mem.take() {
            match e {
                Emission::Pane {
                    trigger_ms,
                    predicate,
                    tuples,
                } => {
                    for t in tuples {
                        output.push((
                            trigger_ms,
                            predicate.to_string(),
                            t.iter().map(|v| v.to_string()).collect(),
                        ));
                    }
                }
                Emission::Record {
                    timestamp_ms,
                    predicate,
                    tuple,
                } => output.push((
                    timestamp_ms,
                    predicate.to_string(),
                    tuple.iter().map(|v| v.to_string()).collect(),
                )),
            }
        }
        let m = larstream::bench::RunMetrics::from_report("python", 1, 0, &report, String::new());
        Ok(RunOutput {
            output,
            records_in: m.total_records_in,
            facts_out: m.total_facts_out,
            wall_ms: m.wall_duration_ms,
            throughput_tps: m.throughput_tps,
            latency_p50_us: m.latency_p50_us,
            triggers: report.triggers.iter().map(|t| t.trigger_ms).collect(),
        })
    }
}

/// Parses and validates a program.
#[pyfunction]
fn parse(text: &str) -> PyResult<PyProgram> {
    PyProgram::new(text)
}

/// Diagnostics as `line:col: message` strings; empty when valid.
#[pyfunction]
fn validate(text: &str) -> Vec<String> {
    match parse_program(text) {
        Ok(_) => Vec::new(),
        Err(e) => e.to_string().lines().map(String::from).collect(),
    }
}

/// Synthetic workload as `(subject, predicate, object, timestamp_ms)`.
#[pyfunction]
#[pyo3(signature = (spec, seed = None))]
fn generate(spec: &str, seed: Option<u64>) -> PyResult<Vec<PyFact>> {
    let mut w: Workload = spec.parse().map_err(value_err)?;
    if let Some(seed) = seed {
        w = w.with_seed(seed);
    }
    Ok(stream_io::generate(&w)
        .into_iter()
        .map(|(r, ts)| (r.subject.to_string(), r.predicate.to_string(), r.object.to_string(), ts))
        .collect())
}

/// Atoms holding in the window `(t - length_ms, t]`, as sorted
/// `(predicate, args)` pairs.
#[pyfunction]
#[pyo3(signature = (facts, length_ms, t, slide_ms = None))]
fn window(facts: Vec<PyFact>, length_ms: u64, t: u64, slide_ms: Option<u64>) -> PyResult<Vec<(String, Vec<String>)>> {
    let slide = slide_ms.unwrap_or(length_ms.max(1));
    if slide == 0 {
        return Err(value_err("slide_ms must be positive"));
    }
    let store: FactStore = to_facts(facts).into_iter().collect();
    Ok(window_contents(&store, WindowSpec::new(length_ms, slide), t)
        .into_iter()
        .map(|a| (a.predicate.to_string(), a.args.iter().map(|v| v.to_string()).collect()))
        .collect())
}

#[pymodule]
pub fn larstream_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProgram>()?;
    m.add_class::<RunOutput>()?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(window, m)?)?;
    Ok(())
}
