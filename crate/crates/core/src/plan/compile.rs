use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use super::rule::{AtomScan, HeadTerm, JoinStep, RulePlan};
use super::{build_dep_graph, scc_plan, Scc, SccPlan};
use crate::model::{validate, Diagnostic, Program, Value, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// Micro-batch, bulk synchronous.
    Bsp,
    /// Record at a time.
    Rat,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Target::Bsp => "bsp",
            Target::Rat => "rat",
        })
    }
}

impl std::str::FromStr for Target {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bsp" => Ok(Target::Bsp),
            "rat" => Ok(Target::Rat),
            other => Err(format!("unknown engine `{other}` (expected bsp or rat)")),
        }
    }
}

/// How a predicate's facts live in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PredicateKind {
    /// Input stream.
    Edb,
    /// Derived per record by stateless rules from a stream; facts keep the
    /// timestamp of the record they came from.
    Stream,
    /// Derived from windows; holds at an evaluation time.
    Relation,
}

fn join_names(preds: &BTreeSet<Value>) -> String {
    let names: Vec<&str> = preds.iter().map(|p| &**p).collect();
    format!("{{{}}}", names.join(", "))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("program is invalid: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("recursion unsupported on RAT: SCC #{scc} {} is recursive", join_names(.predicates))]
    RecursionUnsupported { scc: usize, predicates: BTreeSet<Value> },
    #[error("multiple distinct windows in one recursive SCC: SCC #{scc} {}", join_names(.predicates))]
    MultipleWindows { scc: usize, predicates: BTreeSet<Value> },
    #[error("recursive SCC #{scc} {} needs a window on every rule", join_names(.predicates))]
    RecursionWithoutWindow { scc: usize, predicates: BTreeSet<Value> },
    #[error("stateless rule {rule} has {atoms} body atoms; joins need a window")]
    StatelessJoin { rule: usize, atoms: usize },
    #[error("predicate `{predicate}` is derived both per record and from windows")]
    MixedKinds { predicate: Value },
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Source {
        predicate: Value,
    },
    /// Constant / repeated-variable filter plus variable binding (σ).
    Select {
        scan: AtomScan,
    },
    Window(WindowSpec),
    /// Natural join on shared variables (⋈); exactly two inputs.
    Join {
        step: JoinStep,
    },
    Project {
        predicate: Value,
        rule: usize,
        schema: Vec<Value>,
        head: Vec<HeadTerm>,
    },
    Union {
        predicate: Value,
    },
    Distinct {
        predicate: Value,
    },
    /// Semi-naive evaluation of one recursive SCC. `inner` is a
    /// self-contained plan whose `Input` nodes read this node's inputs in
    /// order and whose `Feedback` nodes read the current iteration.
    Fixpoint {
        scc: usize,
        predicates: BTreeSet<Value>,
        inner: Vec<Operator>,
    },
    Input {
        predicate: Value,
    },
    Feedback {
        predicate: Value,
    },
    /// One predicate of a fixpoint's result.
    Extract {
        predicate: Value,
    },
    Sink {
        predicate: Value,
    },
}

impl OpKind {
    pub fn is_stateful(&self) -> bool {
        matches!(
            self,
            OpKind::Join { .. } | OpKind::Distinct { .. } | OpKind::Fixpoint { .. } | OpKind::Sink { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operator {
    pub id: NodeId,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
}

/// The logical DAG shared by both engines, together with the analysis it
/// was built from.
#[derive(Debug, Clone)]
pub struct OperatorPlan {
    pub target: Target,
    pub program: Program,
    pub sccs: SccPlan,
    pub nodes: Vec<Operator>,
    pub rule_plans: Vec<RulePlan>,
    pub kinds: BTreeMap<Value, PredicateKind>,
    /// Slides at whose multiples a relation predicate's pane is emitted.
    pub emit_slides: BTreeMap<Value, BTreeSet<u64>>,
    /// Node whose output carries each predicate.
    pub outputs: BTreeMap<Value, NodeId>,
    pub sinks: BTreeMap<Value, NodeId>,
}

impl OperatorPlan {
    /// Validates, analyses and compiles in one step.
    pub fn build(program: &Program, target: Target) -> Result<Self, CompileError> {
        let sccs = scc_plan(&build_dep_graph(program), program);
        compile(program, &sccs, target)
    }

    pub fn kind(&self, predicate: &str) -> PredicateKind {
        self.kinds.get(predicate).copied().unwrap_or(PredicateKind::Edb)
    }

    /// Intensional predicates, each of which has a sink.
    pub fn sink_predicates(&self) -> impl Iterator<Item = &Value> {
        self.sinks.keys()
    }

    /// Rules deriving stream predicates, in dependency order.
    pub fn stream_rules(&self) -> Vec<usize> {
        self.rules_where(|k| k == PredicateKind::Stream)
    }

    /// Rules deriving relation predicates, in dependency order.
    pub fn relation_rules(&self) -> Vec<usize> {
        self.rules_where(|k| k == PredicateKind::Relation)
    }

    fn rules_where(&self, keep: impl Fn(PredicateKind) -> bool) -> Vec<usize> {
        self.sccs
            .components
            .iter()
            .flat_map(|c| c.rules.iter().copied())
            .filter(|&r| keep(self.kind(&self.program.rules[r].head.predicate)))
            .collect()
    }

    /// Every slide that drives a relation pane.
    pub fn slides(&self) -> BTreeSet<u64> {
        self.emit_slides.values().flatten().copied().collect()
    }

    pub fn has_stream_outputs(&self) -> bool {
        self.kinds.values().any(|k| *k == PredicateKind::Stream)
    }

    pub fn is_recursive(&self) -> bool {
        self.sccs.components.iter().any(|c| c.recursive)
    }

    pub fn node(&self, id: NodeId) -> &Operator {
        &self.nodes[id]
    }

    /// Consumers of every node, in id order.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &i in &n.inputs {
                if !out[i].contains(&n.id) {
                    out[i].push(n.id);
                }
            }
        }
        out
    }

    /// Whether `t` is a pane boundary for `predicate`.
    pub fn emits_at(&self, predicate: &str, t: u64) -> bool {
        self.emit_slides
            .get(predicate)
            .is_some_and(|s| s.iter().any(|&slide| t.is_multiple_of(slide)))
    }
}

struct Builder {
    nodes: Vec<Operator>,
}

impl Builder {
    fn push(&mut self, kind: OpKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Operator { id, kind, inputs });
        id
    }

    /// Lowers one rule body onto `input_of(atom predicate)` and returns the
    /// Project node.
    fn rule_chain(
        &mut self,
        plan: &RulePlan,
        window_atoms: &[bool],
        mut input_of: impl FnMut(&mut Self, &Value) -> NodeId,
    ) -> NodeId {
        let mut branches = Vec::with_capacity(plan.scans.len());
        for (i, scan) in plan.scans.iter().enumerate() {
            let mut node = input_of(self, &scan.predicate);
            if !scan.is_identity() {
                node = self.push(OpKind::Select { scan: scan.clone() }, vec![node]);
            }
            if window_atoms[i] {
                let w = plan.window.expect("window atom without window");
                node = self.push(OpKind::Window(w), vec![node]);
            }
            branches.push(node);
        }
        let mut acc = branches[0];
        for (step, &right) in plan.joins.iter().zip(&branches[1..]) {
            acc = self.push(OpKind::Join { step: step.clone() }, vec![acc, right]);
        }
        self.push(
            OpKind::Project {
                predicate: plan.head_predicate.clone(),
                rule: plan.rule_index,
                schema: plan.schema().to_vec(),
                head: plan.head.clone(),
            },
            vec![acc],
        )
    }
}

/// Kind of every predicate, and the slides at which relation predicates emit.
type Classification = (BTreeMap<Value, PredicateKind>, BTreeMap<Value, BTreeSet<u64>>);

fn classify(program: &Program, sccs: &SccPlan, target: Target) -> Result<Classification, CompileError> {
    let mut kinds = BTreeMap::new();
    let mut emit: BTreeMap<Value, BTreeSet<u64>> = BTreeMap::new();
    for p in &program.edb_predicates {
        kinds.insert(p.clone(), PredicateKind::Edb);
    }
    for scc in &sccs.components {
        if scc.rules.is_empty() {
            for p in &scc.predicates {
                kinds.entry(p.clone()).or_insert(if program.idb_predicates.contains(p) {
                    PredicateKind::Relation
                } else {
                    PredicateKind::Edb
                });
            }
            continue;
        }
        if scc.recursive {
            classify_recursive(program, scc, target, &mut kinds, &mut emit)?;
            continue;
        }
        let pred = scc.predicates.iter().next().expect("empty SCC").clone();
        let mut kind = None;
        let mut slides = BTreeSet::new();
        for &r in &scc.rules {
            let rule = &program.rules[r];
            let this = match rule.window {
                Some(w) => {
                    slides.insert(w.slide_ms);
                    PredicateKind::Relation
                }
                None => {
                    if rule.body.len() != 1 {
                        return Err(CompileError::StatelessJoin {
                            rule: r,
                            atoms: rule.body.len(),
                        });
                    }
                    let body = &rule.body[0].predicate;
                    match kinds.get(body).copied().unwrap_or(PredicateKind::Edb) {
                        PredicateKind::Relation => {
                            slides.extend(emit.get(body).into_iter().flatten().copied());
                            PredicateKind::Relation
                        }
                        _ => PredicateKind::Stream,
                    }
                }
            };
            match kind {
                None => kind = Some(this),
                Some(k) if k != this => {
                    return Err(CompileError::MixedKinds { predicate: pred });
                }
                _ => {}
            }
        }
        let kind = kind.expect("SCC without rules");
        if kind == PredicateKind::Relation {
            emit.insert(pred.clone(), slides);
        }
        kinds.insert(pred, kind);
    }
    Ok((kinds, emit))
}

fn classify_recursive(
    program: &Program,
    scc: &Scc,
    target: Target,
    kinds: &mut BTreeMap<Value, PredicateKind>,
    emit: &mut BTreeMap<Value, BTreeSet<u64>>,
) -> Result<(), CompileError> {
    if target == Target::Rat {
        return Err(CompileError::RecursionUnsupported {
            scc: scc.id,
            predicates: scc.predicates.clone(),
        });
    }
    let windows: BTreeSet<Option<WindowSpec>> = scc.rules.iter().map(|&r| program.rules[r].window).collect();
    if windows.len() > 1 {
        return Err(CompileError::MultipleWindows {
            scc: scc.id,
            predicates: scc.predicates.clone(),
        });
    }
    let Some(Some(window)) = windows.into_iter().next() else {
        return Err(CompileError::RecursionWithoutWindow {
            scc: scc.id,
            predicates: scc.predicates.clone(),
        });
    };
    for p in &scc.predicates {
        kinds.insert(p.clone(), PredicateKind::Relation);
        emit.insert(p.clone(), [window.slide_ms].into_iter().collect());
    }
    Ok(())
}

/// Lowers a valid program into the operator DAG for `target`.
pub fn compile(program: &Program, sccs: &SccPlan, target: Target) -> Result<OperatorPlan, CompileError> {
    let diagnostics = validate(program);
    if !diagnostics.is_empty() {
        return Err(CompileError::Invalid(diagnostics));
    }
    let (kinds, emit_slides) = classify(program, sccs, target)?;
    let rule_plans: Vec<RulePlan> = program
        .rules
        .iter()
        .enumerate()
        .map(|(i, r)| RulePlan::compile(r, i))
        .collect();
    let is_windowed_input = |rule: &RulePlan, pred: &Value| {
        rule.window.is_some()
            && matches!(
                kinds.get(pred).copied().unwrap_or(PredicateKind::Edb),
                PredicateKind::Edb | PredicateKind::Stream
            )
    };

    let mut b = Builder { nodes: Vec::new() };
    let mut outputs: BTreeMap<Value, NodeId> = BTreeMap::new();
    let used_edb: BTreeSet<&Value> = program
        .rules
        .iter()
        .flat_map(|r| r.body.iter().map(|a| &a.predicate))
        .filter(|p| kinds.get(*p) == Some(&PredicateKind::Edb))
        .collect();
    for p in used_edb {
        let id = b.push(OpKind::Source { predicate: p.clone() }, vec![]);
        outputs.insert(p.clone(), id);
    }

    let mut sinks = BTreeMap::new();
    for scc in &sccs.components {
        if scc.rules.is_empty() {
            continue;
        }
        if scc.recursive {
            let mut inner = Builder { nodes: Vec::new() };
            let mut outer_inputs: Vec<NodeId> = Vec::new();
            let mut inner_sources: BTreeMap<Value, NodeId> = BTreeMap::new();
            let mut per_pred: BTreeMap<Value, Vec<NodeId>> = BTreeMap::new();
            for &r in &scc.rules {
                let plan = &rule_plans[r];
                let windowed: Vec<bool> = plan
                    .scans
                    .iter()
                    .map(|s| !scc.predicates.contains(&s.predicate) && is_windowed_input(plan, &s.predicate))
                    .collect();
                let project = inner.rule_chain(plan, &windowed, |b, pred| {
                    if let Some(&id) = inner_sources.get(pred) {
                        return id;
                    }
                    let kind = if scc.predicates.contains(pred) {
                        OpKind::Feedback {
                            predicate: pred.clone(),
                        }
                    } else {
                        outer_inputs.push(outputs[pred]);
                        OpKind::Input {
                            predicate: pred.clone(),
                        }
                    };
                    let id = b.push(kind, vec![]);
                    inner_sources.insert(pred.clone(), id);
                    id
                });
                per_pred.entry(plan.head_predicate.clone()).or_default().push(project);
            }
            for (pred, projects) in per_pred {
                let merged = if projects.len() > 1 {
                    inner.push(
                        OpKind::Union {
                            predicate: pred.clone(),
                        },
                        projects,
                    )
                } else {
                    projects[0]
                };
                inner.push(OpKind::Distinct { predicate: pred }, vec![merged]);
            }
            let fix = b.push(
                OpKind::Fixpoint {
                    scc: scc.id,
                    predicates: scc.predicates.clone(),
                    inner: inner.nodes,
                },
                outer_inputs,
            );
            for p in &scc.predicates {
                let id = b.push(OpKind::Extract { predicate: p.clone() }, vec![fix]);
                outputs.insert(p.clone(), id);
                sinks.insert(p.clone(), b.push(OpKind::Sink { predicate: p.clone() }, vec![id]));
            }
            continue;
        }

        let pred = scc.predicates.iter().next().expect("empty SCC").clone();
        let mut projects = Vec::new();
        for &r in &scc.rules {
            let plan = &rule_plans[r];
            let windowed: Vec<bool> = plan
                .scans
                .iter()
                .map(|s| is_windowed_input(plan, &s.predicate))
                .collect();
            projects.push(b.rule_chain(plan, &windowed, |_, p| outputs[p]));
        }
        let mut out = if projects.len() > 1 {
            b.push(
                OpKind::Union {
                    predicate: pred.clone(),
                },
                projects,
            )
        } else {
            projects[0]
        };
        if kinds[&pred] == PredicateKind::Relation {
            out = b.push(
                OpKind::Distinct {
                    predicate: pred.clone(),
                },
                vec![out],
            );
        }
        outputs.insert(pred.clone(), out);
        sinks.insert(pred.clone(), b.push(OpKind::Sink { predicate: pred }, vec![out]));
    }
    // Intensional predicates without rules still get an (empty) sink.
    for p in &program.idb_predicates {
        if !sinks.contains_key(p) {
            let id = b.push(OpKind::Sink { predicate: p.clone() }, vec![]);
            sinks.insert(p.clone(), id);
        }
    }

    Ok(OperatorPlan {
        target,
        program: program.clone(),
        sccs: sccs.clone(),
        nodes: b.nodes,
        rule_plans,
        kinds,
        emit_slides,
        outputs,
        sinks,
    })
}
