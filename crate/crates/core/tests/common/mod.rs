//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use larstream::model::{Atom, Fact, Program, Rule, Term, Value, WindowSpec};
use larstream::stream_io::{Emission, MemorySink, Sink, StreamSource};
use larstream::{start, EngineConfig, OperatorPlan, RunReport, Target};
use rand::seq::SliceRandom;
use rand::Rng;

/// Pane contents keyed by `(trigger_ms, predicate)`.
pub type Panes = BTreeMap<(u64, String), BTreeSet<Vec<String>>>;

/// A set of named relations of string tuples.
pub type Db = BTreeMap<String, BTreeSet<Vec<String>>>;

pub fn queries_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../queries")
}

pub fn read_query(name: &str) -> String {
    std::fs::read_to_string(queries_dir().join(name)).expect("bundled query")
}

fn unify(atom: &Atom, row: &[String], binding: &mut HashMap<String, String>) -> bool {
    if atom.terms.len() != row.len() {
        return false;
    }
    let mut added = Vec::new();
    for (term, v) in atom.terms.iter().zip(row) {
        let ok = match term {
            Term::Constant(c) => &**c == v,
            Term::Variable(x) => match binding.get(&**x) {
                Some(b) => b == v,
                None => {
                    binding.insert(x.to_string(), v.clone());
                    added.push(x.to_string());
                    true
                }
            },
        };
        if !ok {
            for x in added {
                binding.remove(&x);
            }
            return false;
        }
    }
    true
}

fn ground(atom: &Atom, binding: &HashMap<String, String>) -> Vec<String> {
    atom.terms
        .iter()
        .map(|t| match t {
            Term::Constant(c) => c.to_string(),
            Term::Variable(x) => binding[&**x].clone(),
        })
        .collect()
}

/// All head tuples of `rule` over `db`, by nested-loop backtracking.
pub fn fire_rule(rule: &Rule, db: &Db) -> BTreeSet<Vec<String>> {
    fn go(body: &[Atom], db: &Db, binding: &mut HashMap<String, String>, head: &Atom, out: &mut BTreeSet<Vec<String>>) {
        let Some((first, rest)) = body.split_first() else {
            out.insert(ground(head, binding));
            return;
        };
        let Some(rel) = db.get(&*first.predicate) else { return };
        for row in rel {
            let saved = binding.clone();
            if unify(first, row, binding) {
                go(rest, db, binding, head, out);
            }
            *binding = saved;
        }
    }
    let mut out = BTreeSet::new();
    go(&rule.body, db, &mut HashMap::new(), &rule.head, &mut out);
    out
}

/// Least model by applying every rule to everything until nothing changes.
pub fn least_model(rules: &[Rule], edb: &Db) -> Db {
    let mut db = edb.clone();
    loop {
        let mut changed = false;
        for r in rules {
            let derived = fire_rule(r, &db);
            let target = db.entry(r.head.predicate.to_string()).or_default();
            for t in derived {
                changed |= target.insert(t);
            }
        }
        if !changed {
            db.retain(|_, rel| !rel.is_empty());
            return db;
        }
    }
}

/// Facts with `t - length < ts <= t`, by linear scan.
pub fn window_filter(facts: &[Fact], length_ms: u64, t: u64) -> Db {
    let mut db = Db::new();
    for f in facts {
        if f.timestamp_ms <= t && f.timestamp_ms as u128 + length_ms as u128 > t as u128 {
            db.entry(f.atom.predicate.to_string())
                .or_default()
                .insert(f.atom.args.iter().map(|v| v.to_string()).collect());
        }
    }
    db
}

/// Expected panes of a program whose rules all share one window, at every
/// slide multiple up to the first one at or after the last timestamp. An
/// empty stream has no triggers.
pub fn oracle_panes(program: &Program, facts: &[Fact]) -> Panes {
    let windows: BTreeSet<WindowSpec> = program.rules.iter().filter_map(|r| r.window).collect();
    assert_eq!(windows.len(), 1, "oracle handles one shared window");
    let w = *windows.iter().next().unwrap();
    let last = facts.iter().map(|f| f.timestamp_ms).max().unwrap_or(0);
    let heads: BTreeSet<String> = program.rules.iter().map(|r| r.head.predicate.to_string()).collect();
    let mut out = Panes::new();
    if facts.is_empty() {
        return out;
    }
    let mut t = w.slide_ms;
    loop {
        let model = least_model(&program.rules, &window_filter(facts, w.length_ms, t));
        for h in &heads {
            out.insert((t, h.clone()), model.get(h).cloned().unwrap_or_default());
        }
        if t >= last {
            return out;
        }
        t += w.slide_ms;
    }
}

/// Pane emissions as a map; panics on stream records.
pub fn panes_of(emissions: &[Emission]) -> Panes {
    let mut out = Panes::new();
    for e in emissions {
        match e {
            Emission::Pane {
                trigger_ms,
                predicate,
                tuples,
            } => {
                let prev = out.insert(
                    (*trigger_ms, predicate.to_string()),
                    tuples
                        .iter()
                        .map(|t| t.iter().map(|v| v.to_string()).collect())
                        .collect(),
                );
                assert!(prev.is_none(), "duplicate pane {trigger_ms} {predicate}");
            }
            Emission::Record { .. } => panic!("unexpected stream record {e:?}"),
        }
    }
    out
}

/// Transitive closure by repeated squaring of the boolean adjacency matrix.
pub fn closure_by_squaring(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for &(u, v) in edges {
        r[u][v] = true;
    }
    loop {
        let mut next = r.clone();
        for i in 0..n {
            for k in 0..n {
                if r[i][k] {
                    for j in 0..n {
                        if r[k][j] {
                            next[i][j] = true;
                        }
                    }
                }
            }
        }
        if next == r {
            return r;
        }
        r = next;
    }
}

/// Runs `program` on `engine` and returns the report and the emissions.
pub fn run_engine<S: StreamSource + 'static>(
    program: &Program,
    source: S,
    config: &EngineConfig,
) -> (RunReport, Vec<Emission>) {
    let mem = MemorySink::new();
    let report = run_with_sink(program, source, Box::new(mem.clone()), config);
    (report, mem.take())
}

pub fn run_with_sink<S: StreamSource + 'static>(
    program: &Program,
    source: S,
    sink: Box<dyn Sink>,
    config: &EngineConfig,
) -> RunReport {
    let plan = OperatorPlan::build(program, config.engine).expect("compiles");
    start(plan, source, sink, config).expect("starts").join().expect("runs")
}

pub fn config(engine: Target, parallelism: usize) -> EngineConfig {
    EngineConfig {
        engine,
        parallelism,
        ..EngineConfig::default()
    }
}

/// Vocabulary of the random program generator.
pub struct Vocab {
    pub edb: Vec<(String, usize)>,
    pub idb: Vec<(String, usize)>,
    pub constants: Vec<String>,
}

impl Vocab {
    /// Three extensional and four intensional predicates of arity 1 to 3.
    pub fn random(rng: &mut impl Rng, constants: Vec<String>) -> Self {
        let edb = (0..3).map(|i| (format!("e{i}"), rng.gen_range(1..=3))).collect();
        let idb = (0..4).map(|i| (format!("p{i}"), rng.gen_range(1..=3))).collect();
        Vocab { edb, idb, constants }
    }

    pub fn plain_constants(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }
}

const VARS: [&str; 4] = ["X", "Y", "Z", "W"];

fn random_term(rng: &mut impl Rng, vocab: &Vocab) -> Term {
    if rng.gen_bool(0.75) {
        Term::var(VARS[rng.gen_range(0..VARS.len())])
    } else {
        Term::constant(vocab.constants.choose(rng).unwrap())
    }
}

/// A random safe positive program of `1..=max_rules` rules. Windows are
/// attached when `windows` is set.
pub fn random_program(rng: &mut impl Rng, vocab: &Vocab, max_rules: usize, windows: bool) -> Program {
    let n_rules = rng.gen_range(1..=max_rules);
    let mut rules = Vec::new();
    for _ in 0..n_rules {
        let n_body = rng.gen_range(1..=3);
        let mut body = Vec::new();
        for _ in 0..n_body {
            let (p, arity) = if rng.gen_bool(0.6) {
                vocab.edb.choose(rng).unwrap()
            } else {
                vocab.idb.choose(rng).unwrap()
            };
            body.push(Atom::new(p, (0..*arity).map(|_| random_term(rng, vocab)).collect()));
        }
        let body_vars: Vec<Value> = body
            .iter()
            .flat_map(|a| a.variables().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let (h, arity) = vocab.idb.choose(rng).unwrap();
        let head_terms = (0..*arity)
            .map(|_| {
                if !body_vars.is_empty() && rng.gen_bool(0.8) {
                    Term::Variable(body_vars.choose(rng).unwrap().clone())
                } else {
                    Term::constant(vocab.constants.choose(rng).unwrap())
                }
            })
            .collect();
        let window = windows.then(|| {
            let slide = rng.gen_range(1..=5) * 500;
            WindowSpec::new(slide * rng.gen_range(1..=4), slide)
        });
        rules.push(Rule::new(
            Atom::new(h, head_terms),
            body,
            window.filter(|_| rng.gen_bool(0.7)),
        ));
    }
    let program = Program::from_rules(rules);
    assert!(program.validate().is_empty(), "generator produced an invalid program");
    program
}

/// Random extensional relations over the vocabulary's constants.
pub fn random_edb(rng: &mut impl Rng, program: &Program, vocab: &Vocab, max_tuples: usize) -> Db {
    let mut db = Db::new();
    for p in &program.edb_predicates {
        let arity = program.arities[p];
        let rel = db.entry(p.to_string()).or_default();
        for _ in 0..rng.gen_range(0..=max_tuples) {
            rel.insert(
                (0..arity)
                    .map(|_| vocab.constants.choose(rng).unwrap().clone())
                    .collect(),
            );
        }
    }
    db
}

pub fn to_snapshot(db: &Db) -> larstream::Snapshot {
    db.iter()
        .map(|(p, rel)| {
            (
                Value::from(p.as_str()),
                rel.iter()
                    .map(|t| t.iter().map(|v| Value::from(v.as_str())).collect())
                    .collect(),
            )
        })
        .collect()
}

pub fn from_snapshot(s: &larstream::Snapshot) -> Db {
    s.iter()
        .filter(|(_, rel)| !rel.is_empty())
        .map(|(p, rel)| {
            (
                p.to_string(),
                rel.iter().map(|t| t.iter().map(|v| v.to_string()).collect()).collect(),
            )
        })
        .collect()
}
