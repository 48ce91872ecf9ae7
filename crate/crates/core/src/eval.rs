//! Relational core: rule evaluation by hash join, naive and semi-naive
//! fixpoints, and stratified evaluation over a static snapshot.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rayon::prelude::*;

use crate::model::{Program, Relation, Rule, Snapshot, Tuple, Value, WindowSpec};
use crate::plan::{RulePlan, SccPlan};

/// Variable name to constant.
pub type Binding = BTreeMap<Value, Value>;

/// Newly derived tuples per predicate in one iteration.
pub type Delta = Snapshot;

/// Thread and partition settings for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub threads: usize,
    /// Hash partitions of a rule's first body relation.
    pub partitions: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threads: 1,
            partitions: 1,
        }
    }
}

/// Owns the worker pool used by evaluation. With one thread everything runs
/// on the caller.
#[derive(Clone)]
pub struct Evaluator {
    options: EvalOptions,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluator").field("options", &self.options).finish()
    }
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator::new(EvalOptions::default())
    }
}

impl Evaluator {
    pub fn new(options: EvalOptions) -> Self {
        let options = EvalOptions {
            threads: options.threads.max(1),
            partitions: options.partitions.max(1),
        };
        let pool = (options.threads > 1).then(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(options.threads)
                    .thread_name(|i| format!("larstream-eval-{i}"))
                    .build()
                    .expect("failed to build evaluation pool"),
            )
        });
        Evaluator { options, pool }
    }

    /// `threads` workers, `threads` partitions.
    pub fn with_parallelism(threads: usize) -> Self {
        Evaluator::new(EvalOptions {
            threads,
            partitions: threads,
        })
    }

    pub fn options(&self) -> EvalOptions {
        self.options
    }

    fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        match &self.pool {
            Some(pool) if items.len() > 1 => pool.install(|| items.into_par_iter().map(f).collect()),
            _ => items.into_iter().map(f).collect(),
        }
    }
}

fn hash_of(values: &[Value]) -> u64 {
    let mut h = DefaultHasher::new();
    values.hash(&mut h);
    h.finish()
}

/// Joins the scanned first-atom rows through the rest of the body.
fn join_rows(plan: &RulePlan, mut rows: Vec<Tuple>, inputs: &[&Relation]) -> Relation {
    for (step, (scan, rel)) in plan.joins.iter().zip(plan.scans[1..].iter().zip(&inputs[1..])) {
        if rows.is_empty() {
            break;
        }
        let right: Vec<Tuple> = rel.iter().filter_map(|t| scan.apply(t)).collect();
        let mut next = Vec::new();
        if step.is_cross_product() {
            for l in &rows {
                for r in &right {
                    next.push(step.combine(l, r));
                }
            }
        } else {
            let mut table: HashMap<Tuple, Vec<&Tuple>> = HashMap::new();
            for r in &right {
                table.entry(step.right_key(r)).or_default().push(r);
            }
            for l in &rows {
                if let Some(matches) = table.get(&step.left_key(l)) {
                    for r in matches {
                        next.push(step.combine(l, r));
                    }
                }
            }
        }
        rows = next;
    }
    rows.iter().map(|row| plan.project(row)).collect()
}

/// Evaluates one compiled rule. `inputs[i]` is the relation for body atom `i`.
pub(crate) fn eval_plan(plan: &RulePlan, inputs: &[&Relation], ev: &Evaluator) -> Relation {
    let first: Vec<Tuple> = inputs[0].iter().filter_map(|t| plan.scans[0].apply(t)).collect();
    let k = ev.options.partitions;
    if k <= 1 || first.len() < 2 {
        return join_rows(plan, first, inputs);
    }
    let mut parts: Vec<Vec<Tuple>> = vec![Vec::new(); k];
    for row in first {
        let p = (hash_of(&row) % k as u64) as usize;
        parts[p].push(row);
    }
    let results = ev.map(parts, |rows| join_rows(plan, rows, inputs));
    let mut out = Relation::new();
    for r in results {
        out.extend(r);
    }
    out
}

fn lookup<'a>(snapshot: &'a Snapshot, predicate: &str, empty: &'a Relation) -> &'a Relation {
    snapshot.get(predicate).unwrap_or(empty)
}

/// `{ head·θ | θ grounds every body atom against snapshot }`.
pub fn eval_rule(rule: &Rule, snapshot: &Snapshot) -> Relation {
    eval_rule_with(rule, snapshot, &Evaluator::default())
}

pub fn eval_rule_with(rule: &Rule, snapshot: &Snapshot, ev: &Evaluator) -> Relation {
    let plan = RulePlan::compile(rule, 0);
    let empty = Relation::new();
    let inputs: Vec<&Relation> = rule
        .body
        .iter()
        .map(|a| lookup(snapshot, &a.predicate, &empty))
        .collect();
    eval_plan(&plan, &inputs, ev)
}

/// All substitutions of the rule body's variables that ground every body
/// atom against the snapshot.
pub fn bindings(rule: &Rule, snapshot: &Snapshot) -> Vec<Binding> {
    let plan = RulePlan::compile(rule, 0);
    let empty = Relation::new();
    let mut rows: Vec<Tuple> = lookup(snapshot, &rule.body[0].predicate, &empty)
        .iter()
        .filter_map(|t| plan.scans[0].apply(t))
        .collect();
    for (i, step) in plan.joins.iter().enumerate() {
        let rel = lookup(snapshot, &rule.body[i + 1].predicate, &empty);
        let right: Vec<Tuple> = rel.iter().filter_map(|t| plan.scans[i + 1].apply(t)).collect();
        rows = rows
            .iter()
            .flat_map(|l| {
                right
                    .iter()
                    .filter(|r| step.left_key(l) == step.right_key(r))
                    .map(|r| step.combine(l, r))
                    .collect::<Vec<_>>()
            })
            .collect();
    }
    rows.into_iter()
        .map(|row| plan.schema().iter().cloned().zip(row).collect())
        .collect()
}

/// Least fixpoint by repeated full evaluation. Returns the input relations
/// together with every derived one.
pub fn naive_fixpoint(rules: &[Rule], edb: &Snapshot) -> Snapshot {
    let plans: Vec<RulePlan> = rules.iter().enumerate().map(|(i, r)| RulePlan::compile(r, i)).collect();
    let mut db = edb.clone();
    let empty = Relation::new();
    loop {
        let mut changed = false;
        for (rule, plan) in rules.iter().zip(&plans) {
            let inputs: Vec<&Relation> = rule.body.iter().map(|a| lookup(&db, &a.predicate, &empty)).collect();
            let derived = eval_plan(plan, &inputs, &Evaluator::default());
            let target = db.entry(rule.head.predicate.clone()).or_default();
            if !target.absorb(derived).is_empty() {
                changed = true;
            }
        }
        if !changed {
            return db;
        }
    }
}

/// Result of a semi-naive run over one component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixpointOutcome {
    /// Relations of the component's head predicates.
    pub relations: Snapshot,
    /// Rounds that produced at least one new tuple.
    pub iterations: usize,
}

/// Evaluates the rules of one component to their least fixpoint, reading
/// every other predicate from `snapshot`.
pub fn semi_naive_fixpoint(rules: &[Rule], snapshot: &Snapshot) -> Snapshot {
    semi_naive_with(rules, snapshot, &Evaluator::default()).relations
}

pub fn semi_naive_with(rules: &[Rule], snapshot: &Snapshot, ev: &Evaluator) -> FixpointOutcome {
    let plans: Vec<RulePlan> = rules.iter().enumerate().map(|(i, r)| RulePlan::compile(r, i)).collect();
    let refs: Vec<(&Rule, &RulePlan)> = rules.iter().zip(&plans).collect();
    semi_naive_plans(&refs, &|pred, _| snapshot.get(pred), ev)
}

type BaseFn<'a> = dyn Fn(&str, Option<WindowSpec>) -> Option<&'a Relation> + Sync + 'a;

/// Semi-naive core. For a rule with `r` body atoms in the component, each
/// round evaluates `r` differential versions, one per delta position; the
/// other atoms of the component read the accumulated relation.
fn semi_naive_plans<'a>(rules: &[(&Rule, &RulePlan)], base: &BaseFn<'a>, ev: &Evaluator) -> FixpointOutcome {
    let heads: BTreeSet<Value> = rules.iter().map(|(r, _)| r.head.predicate.clone()).collect();
    let empty = Relation::new();
    let mut total: Snapshot = heads.iter().map(|h| (h.clone(), Relation::new())).collect();

    let eval_version = |rule: &Rule, plan: &RulePlan, delta_at: Option<usize>, total: &Snapshot, delta: &Delta| {
        let inputs: Vec<&Relation> = rule
            .body
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if heads.contains(&a.predicate) {
                    let src = if Some(i) == delta_at { delta } else { total };
                    lookup(src, &a.predicate, &empty)
                } else {
                    base(&a.predicate, rule.window).unwrap_or(&empty)
                }
            })
            .collect();
        (rule.head.predicate.clone(), eval_plan(plan, &inputs, ev))
    };

    let merge = |results: Vec<(Value, Relation)>, total: &mut Snapshot| -> Delta {
        let mut delta = Delta::new();
        for (pred, rel) in results {
            let fresh = total.get_mut(&pred).expect("head missing").absorb(rel);
            if !fresh.is_empty() {
                delta.entry(pred).or_default().extend(fresh);
            }
        }
        delta
    };

    let no_delta = Delta::new();
    let first = ev.map(rules.to_vec(), |(r, p)| eval_version(r, p, None, &total, &no_delta));
    let mut delta = merge(first, &mut total);
    let mut iterations = usize::from(!delta.is_empty());

    let versions: Vec<(&Rule, &RulePlan, usize)> = rules
        .iter()
        .flat_map(|&(r, p)| {
            r.body
                .iter()
                .enumerate()
                .filter(|(_, a)| heads.contains(&a.predicate))
                .map(move |(i, _)| (r, p, i))
        })
        .collect();
    while !delta.is_empty() {
        let active: Vec<(&Rule, &RulePlan, usize)> = versions
            .iter()
            .copied()
            .filter(|(r, _, i)| delta.contains_key(&r.body[*i].predicate))
            .collect();
        let results = ev.map(active, |(r, p, i)| eval_version(r, p, Some(i), &total, &delta));
        delta = merge(results, &mut total);
        if !delta.is_empty() {
            iterations += 1;
        }
    }
    FixpointOutcome {
        relations: total,
        iterations,
    }
}

/// Source of the relations a stratified evaluation does not derive itself.
/// Windowed engines answer per window; static snapshots ignore it.
pub trait BaseRelations: Sync {
    fn relation(&self, predicate: &str, window: Option<WindowSpec>) -> Option<&Relation>;
}

impl BaseRelations for Snapshot {
    fn relation(&self, predicate: &str, _window: Option<WindowSpec>) -> Option<&Relation> {
        self.get(predicate)
    }
}

/// Evaluates components in topological order, running components of one
/// parallel group concurrently. Returns the input snapshot extended with
/// every derived relation.
pub fn eval_stratified(program: &Program, plan: &SccPlan, edb: &Snapshot) -> Snapshot {
    eval_stratified_with(program, plan, edb, &Evaluator::default())
}

pub fn eval_stratified_with(program: &Program, plan: &SccPlan, edb: &Snapshot, ev: &Evaluator) -> Snapshot {
    let rules: Vec<usize> = (0..program.rules.len()).collect();
    let derived = eval_components(program, plan, &rules, edb, ev);
    let mut out = edb.clone();
    out.extend(derived);
    out
}

/// Stratified evaluation restricted to the rules in `rule_set`; every other
/// body predicate comes from `base`. Returns only the derived relations
/// (one entry per head predicate of `rule_set`).
pub fn eval_components(
    program: &Program,
    plan: &SccPlan,
    rule_set: &[usize],
    base: &dyn BaseRelations,
    ev: &Evaluator,
) -> Snapshot {
    let selected: BTreeSet<usize> = rule_set.iter().copied().collect();
    let plans: BTreeMap<usize, RulePlan> = selected
        .iter()
        .map(|&i| (i, RulePlan::compile(&program.rules[i], i)))
        .collect();
    let mut derived = Snapshot::new();
    for i in &selected {
        derived.entry(program.rules[*i].head.predicate.clone()).or_default();
    }
    for group in plan.groups() {
        let jobs: Vec<(Vec<usize>, bool)> = group
            .iter()
            .map(|c| {
                let rules: Vec<usize> = c.rules.iter().copied().filter(|r| selected.contains(r)).collect();
                (rules, c.recursive)
            })
            .filter(|(rules, _)| !rules.is_empty())
            .collect();
        let current = &derived;
        let lookup_base = |pred: &str, window: Option<WindowSpec>| -> Option<&Relation> {
            current.get(pred).or_else(|| base.relation(pred, window))
        };
        let results: Vec<Snapshot> = ev.map(jobs, |(rules, recursive)| {
            let refs: Vec<(&Rule, &RulePlan)> = rules.iter().map(|r| (&program.rules[*r], &plans[r])).collect();
            if recursive {
                semi_naive_plans(&refs, &lookup_base, ev).relations
            } else {
                let empty = Relation::new();
                let mut out = Snapshot::new();
                for (rule, rp) in refs {
                    let inputs: Vec<&Relation> = rule
                        .body
                        .iter()
                        .map(|a| lookup_base(&a.predicate, rule.window).unwrap_or(&empty))
                        .collect();
                    out.entry(rule.head.predicate.clone())
                        .or_default()
                        .extend(eval_plan(rp, &inputs, ev));
                }
                out
            }
        });
        for snap in results {
            for (pred, rel) in snap {
                derived.entry(pred).or_default().extend(rel);
            }
        }
    }
    derived
}
