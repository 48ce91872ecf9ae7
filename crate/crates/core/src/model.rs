//! Logical vocabulary of positive LARS programs and timestamped facts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

/// Interned constant or name. Cloning is a reference-count bump.
pub type Value = Arc<str>;

/// A ground tuple of constants.
pub type Tuple = Vec<Value>;

/// Returns true when `name` is a legal variable name (`[A-Z][A-Za-z0-9_]*`).
pub fn is_variable_name(name: &str) -> bool {
    let mut chars = name.chars();
    match chars.next() {
        Some(c) if c.is_ascii_uppercase() => chars.all(|c| c.is_ascii_alphanumeric() || c == '_'),
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Variable(Value),
    Constant(Value),
}

impl Term {
    pub fn var(name: &str) -> Self {
        Term::Variable(Value::from(name))
    }

    pub fn constant(value: &str) -> Self {
        Term::Constant(Value::from(value))
    }

    pub fn is_variable(&self) -> bool {
        matches!(self, Term::Variable(_))
    }

    pub fn name(&self) -> &str {
        match self {
            Term::Variable(v) | Term::Constant(v) => v,
        }
    }
}

/// Writes `value` as a DSL constant, quoting it whenever it would not
/// re-lex as a bare lowercase word.
pub(crate) fn write_constant(f: &mut impl fmt::Write, value: &str) -> fmt::Result {
    let bare = !value.is_empty()
        && !value.starts_with(|c: char| c.is_ascii_uppercase())
        && value.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if bare {
        f.write_str(value)
    } else {
        f.write_char('"')?;
        for c in value.chars() {
            match c {
                '"' => f.write_str("\\\"")?,
                '\\' => f.write_str("\\\\")?,
                '\n' => f.write_str("\\n")?,
                '\t' => f.write_str("\\t")?,
                c => f.write_char(c)?,
            }
        }
        f.write_char('"')
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Variable(v) => f.write_str(v),
            Term::Constant(c) => write_constant(f, c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Atom {
    pub predicate: Value,
    pub terms: Vec<Term>,
}

impl Atom {
    pub fn new(predicate: &str, terms: Vec<Term>) -> Self {
        Atom {
            predicate: Value::from(predicate),
            terms,
        }
    }

    pub fn arity(&self) -> usize {
        self.terms.len()
    }

    pub fn is_ground(&self) -> bool {
        self.terms.iter().all(|t| !t.is_variable())
    }

    pub fn variables(&self) -> impl Iterator<Item = &Value> {
        self.terms.iter().filter_map(|t| match t {
            Term::Variable(v) => Some(v),
            Term::Constant(_) => None,
        })
    }

    /// Converts a ground atom; `None` if any term is a variable.
    pub fn to_ground(&self) -> Option<GroundAtom> {
        let args = self
            .terms
            .iter()
            .map(|t| match t {
                Term::Constant(c) => Some(c.clone()),
                Term::Variable(_) => None,
            })
            .collect::<Option<Tuple>>()?;
        Some(GroundAtom {
            predicate: self.predicate.clone(),
            args,
        })
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.predicate)?;
        if !self.terms.is_empty() {
            f.write_str("(")?;
            for (i, t) in self.terms.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{t}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

/// A ground atom: predicate plus constant arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroundAtom {
    pub predicate: Value,
    pub args: Tuple,
}

impl GroundAtom {
    pub fn new(predicate: &str, args: &[&str]) -> Self {
        GroundAtom {
            predicate: Value::from(predicate),
            args: args.iter().map(|a| Value::from(*a)).collect(),
        }
    }

    pub fn to_atom(&self) -> Atom {
        Atom {
            predicate: self.predicate.clone(),
            terms: self.args.iter().cloned().map(Term::Constant).collect(),
        }
    }
}

impl fmt::Display for GroundAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.to_atom().fmt(f)
    }
}

/// Time-based sliding window: the last `length_ms` milliseconds, advancing
/// every `slide_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowSpec {
    pub length_ms: u64,
    pub slide_ms: u64,
}

impl WindowSpec {
    pub fn new(length_ms: u64, slide_ms: u64) -> Self {
        WindowSpec { length_ms, slide_ms }
    }

    pub fn tumbling(length_ms: u64) -> Self {
        WindowSpec::new(length_ms, length_ms)
    }

    /// Whether a fact stamped `timestamp` lies in the window evaluated at
    /// `t_eval`, i.e. `t_eval - length < timestamp <= t_eval`.
    pub fn contains(&self, t_eval: u64, timestamp: u64) -> bool {
        timestamp <= t_eval && timestamp as u128 + self.length_ms as u128 > t_eval as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Plain,
    /// `⊞ʷ◇a`: the atom holds at some time point inside the window.
    DiamondInWindow(WindowSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExtendedAtom {
    pub atom: Atom,
    pub modality: Modality,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    pub head: Atom,
    pub body: Vec<Atom>,
    /// Window over the conjunction of the body; `None` makes the rule stateless.
    pub window: Option<WindowSpec>,
}

impl Rule {
    pub fn new(head: Atom, body: Vec<Atom>, window: Option<WindowSpec>) -> Self {
        Rule { head, body, window }
    }

    pub fn is_stateless(&self) -> bool {
        self.window.is_none()
    }

    /// The body atoms with their modality made explicit.
    pub fn extended_body(&self) -> Vec<ExtendedAtom> {
        let modality = match self.window {
            Some(w) => Modality::DiamondInWindow(w),
            None => Modality::Plain,
        };
        self.body
            .iter()
            .map(|a| ExtendedAtom {
                atom: a.clone(),
                modality,
            })
            .collect()
    }
}

/// A positive plain LARS program.
///
/// `arities` records one arity per predicate; when built with
/// [`Program::new`] it is inferred from the first occurrence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub rules: Vec<Rule>,
    pub edb_predicates: BTreeSet<Value>,
    pub idb_predicates: BTreeSet<Value>,
    pub arities: BTreeMap<Value, usize>,
}

impl Program {
    /// Builds a program, adding undeclared head predicates to the IDB set and
    /// undeclared body-only predicates to the EDB set.
    pub fn new(
        rules: Vec<Rule>,
        edb: impl IntoIterator<Item = (String, usize)>,
        idb: impl IntoIterator<Item = (String, usize)>,
    ) -> Self {
        let mut program = Program {
            rules,
            ..Program::default()
        };
        for (name, arity) in edb {
            let name = Value::from(name);
            program.arities.entry(name.clone()).or_insert(arity);
            program.edb_predicates.insert(name);
        }
        for (name, arity) in idb {
            let name = Value::from(name);
            program.arities.entry(name.clone()).or_insert(arity);
            program.idb_predicates.insert(name);
        }
        program.infer_predicates();
        program
    }

    /// Convenience constructor for tests and bindings: every predicate is
    /// inferred from the rules, `edb` only names extra extensional predicates.
    pub fn from_rules(rules: Vec<Rule>) -> Self {
        Program::new(rules, std::iter::empty(), std::iter::empty())
    }

    pub(crate) fn infer_predicates(&mut self) {
        for rule in &self.rules {
            self.arities
                .entry(rule.head.predicate.clone())
                .or_insert(rule.head.arity());
            if !self.edb_predicates.contains(&rule.head.predicate) {
                self.idb_predicates.insert(rule.head.predicate.clone());
            }
        }
        for rule in &self.rules {
            for atom in &rule.body {
                self.arities.entry(atom.predicate.clone()).or_insert(atom.arity());
                if !self.idb_predicates.contains(&atom.predicate) {
                    self.edb_predicates.insert(atom.predicate.clone());
                }
            }
        }
    }

    pub fn predicates(&self) -> BTreeSet<Value> {
        self.edb_predicates.union(&self.idb_predicates).cloned().collect()
    }

    pub fn is_recursive_free(&self) -> bool {
        crate::plan::scc_plan(&crate::plan::build_dep_graph(self), self)
            .components
            .iter()
            .all(|c| !c.recursive)
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        validate(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiagnosticKind {
    UnsafeVariable(Value),
    HeadIsEdb(Value),
    EdbIdbOverlap(Value),
    UndeclaredPredicate(Value),
    ArityMismatch {
        predicate: Value,
        expected: usize,
        found: usize,
    },
    EmptyBody,
    ZeroSlide,
    InvalidVariableName(Value),
    EmptyConstant,
}

/// One violated invariant. `rule` is `None` for program-level findings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub rule: Option<usize>,
    pub kind: DiagnosticKind,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            DiagnosticKind::UnsafeVariable(v) => write!(f, "unsafe-variable {v}")?,
            DiagnosticKind::HeadIsEdb(p) => write!(f, "head-is-edb {p}")?,
            DiagnosticKind::EdbIdbOverlap(p) => write!(f, "edb-idb-overlap {p}")?,
            DiagnosticKind::UndeclaredPredicate(p) => write!(f, "undeclared-predicate {p}")?,
            DiagnosticKind::ArityMismatch {
                predicate,
                expected,
                found,
            } => write!(f, "arity-mismatch {predicate}: expected {expected}, found {found}")?,
            DiagnosticKind::EmptyBody => f.write_str("empty-body")?,
            DiagnosticKind::ZeroSlide => f.write_str("zero-slide")?,
            DiagnosticKind::InvalidVariableName(v) => write!(f, "invalid-variable-name {v}")?,
            DiagnosticKind::EmptyConstant => f.write_str("empty-constant")?,
        }
        match self.rule {
            Some(i) => write!(f, " in rule {i}"),
            None => Ok(()),
        }
    }
}

/// Checks every program and rule invariant; an empty result means valid.
pub fn validate(program: &Program) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for p in program.edb_predicates.intersection(&program.idb_predicates) {
        out.push(Diagnostic {
            rule: None,
            kind: DiagnosticKind::EdbIdbOverlap(p.clone()),
        });
    }
    for (i, rule) in program.rules.iter().enumerate() {
        let mut push = |kind| out.push(Diagnostic { rule: Some(i), kind });
        if rule.body.is_empty() {
            push(DiagnosticKind::EmptyBody);
        }
        if let Some(w) = rule.window {
            if w.slide_ms == 0 {
                push(DiagnosticKind::ZeroSlide);
            }
        }
        let head = &rule.head.predicate;
        if program.edb_predicates.contains(head) {
            push(DiagnosticKind::HeadIsEdb(head.clone()));
        } else if !program.idb_predicates.contains(head) {
            push(DiagnosticKind::UndeclaredPredicate(head.clone()));
        }
        for atom in std::iter::once(&rule.head).chain(&rule.body) {
            if !program.edb_predicates.contains(&atom.predicate)
                && !program.idb_predicates.contains(&atom.predicate)
                && atom.predicate != *head
            {
                push(DiagnosticKind::UndeclaredPredicate(atom.predicate.clone()));
            }
            match program.arities.get(&atom.predicate) {
                Some(&expected) if expected != atom.arity() => push(DiagnosticKind::ArityMismatch {
                    predicate: atom.predicate.clone(),
                    expected,
                    found: atom.arity(),
                }),
                _ => {}
            }
            for term in &atom.terms {
                match term {
                    Term::Variable(v) if !is_variable_name(v) => push(DiagnosticKind::InvalidVariableName(v.clone())),
                    Term::Constant(c) if c.is_empty() => push(DiagnosticKind::EmptyConstant),
                    _ => {}
                }
            }
        }
        let body_vars: BTreeSet<&Value> = rule.body.iter().flat_map(|a| a.variables()).collect();
        let mut reported = BTreeSet::new();
        for v in rule.head.variables() {
            if !body_vars.contains(v) && reported.insert(v) {
                push(DiagnosticKind::UnsafeVariable(v.clone()));
            }
        }
    }
    out
}

/// One element of a stream: a ground atom stamped with its ingestion time.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fact {
    pub atom: GroundAtom,
    pub timestamp_ms: u64,
}

impl Fact {
    pub fn new(atom: GroundAtom, timestamp_ms: u64) -> Self {
        Fact { atom, timestamp_ms }
    }
}

/// Set of tuples of one predicate.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Relation {
    tuples: BTreeSet<Tuple>,
}

impl Relation {
    pub fn new() -> Self {
        Relation::default()
    }

    pub fn insert(&mut self, tuple: Tuple) -> bool {
        self.tuples.insert(tuple)
    }

    pub fn contains(&self, tuple: &[Value]) -> bool {
        self.tuples.contains(tuple)
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tuple> {
        self.tuples.iter()
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = Tuple>) {
        self.tuples.extend(other)
    }

    /// Adds every tuple of `other`, returning the tuples that were new.
    pub fn absorb(&mut self, other: Relation) -> Relation {
        let mut fresh = Relation::new();
        for t in other.tuples {
            if !self.tuples.contains(&t) {
                self.tuples.insert(t.clone());
                fresh.tuples.insert(t);
            }
        }
        fresh
    }

    pub fn difference(&self, other: &Relation) -> Relation {
        Relation {
            tuples: self.tuples.difference(&other.tuples).cloned().collect(),
        }
    }

    pub fn is_subset(&self, other: &Relation) -> bool {
        self.tuples.is_subset(&other.tuples)
    }

    pub fn into_tuples(self) -> BTreeSet<Tuple> {
        self.tuples
    }

    pub fn tuples(&self) -> &BTreeSet<Tuple> {
        &self.tuples
    }
}

impl FromIterator<Tuple> for Relation {
    fn from_iter<I: IntoIterator<Item = Tuple>>(iter: I) -> Self {
        Relation {
            tuples: iter.into_iter().collect(),
        }
    }
}

impl<'a> IntoIterator for &'a Relation {
    type Item = &'a Tuple;
    type IntoIter = std::collections::btree_set::Iter<'a, Tuple>;

    fn into_iter(self) -> Self::IntoIter {
        self.tuples.iter()
    }
}

impl IntoIterator for Relation {
    type Item = Tuple;
    type IntoIter = std::collections::btree_set::IntoIter<Tuple>;

    fn into_iter(self) -> Self::IntoIter {
        self.tuples.into_iter()
    }
}

/// Builds a tuple from string slices.
pub fn tuple(values: &[&str]) -> Tuple {
    values.iter().map(|v| Value::from(*v)).collect()
}

/// Predicate name to relation.
pub type Snapshot = BTreeMap<Value, Relation>;

/// Groups ground atoms into a per-predicate snapshot.
pub fn snapshot_of<'a>(atoms: impl IntoIterator<Item = &'a GroundAtom>) -> Snapshot {
    let mut snap = Snapshot::new();
    for a in atoms {
        snap.entry(a.predicate.clone()).or_default().insert(a.args.clone());
    }
    snap
}

#[cfg(test)]
mod tests {
    use super::*;

    fn atom(p: &str, vars: &[&str]) -> Atom {
        Atom::new(
            p,
            vars.iter()
                .map(|v| {
                    if is_variable_name(v) {
                        Term::var(v)
                    } else {
                        Term::constant(v)
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn variable_names() {
        assert!(is_variable_name("X"));
        assert!(is_variable_name("Obs_1"));
        assert!(!is_variable_name("x"));
        assert!(!is_variable_name("_X"));
        assert!(!is_variable_name(""));
        assert!(!is_variable_name("X-1"));
    }

    #[test]
    fn minimal_safe_rule_is_valid() {
        let p = Program::new(
            vec![Rule::new(atom("h", &["X"]), vec![atom("b", &["X"])], None)],
            [("b".to_string(), 1)],
            [],
        );
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn unsafe_head_variable() {
        let p = Program::from_rules(vec![Rule::new(atom("h", &["X", "Y"]), vec![atom("b", &["X"])], None)]);
        let d = validate(&p);
        assert_eq!(
            d,
            vec![Diagnostic {
                rule: Some(0),
                kind: DiagnosticKind::UnsafeVariable("Y".into())
            }]
        );
        assert_eq!(d[0].to_string(), "unsafe-variable Y in rule 0");
    }

    #[test]
    fn head_declared_edb() {
        let p = Program::new(
            vec![Rule::new(atom("b", &["X"]), vec![atom("b", &["X"])], None)],
            [("b".to_string(), 1)],
            [],
        );
        let d = validate(&p);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::HeadIsEdb("b".into()));
        assert_eq!(d[0].to_string(), "head-is-edb b in rule 0");
    }

    #[test]
    fn arity_mismatch_is_reported() {
        // p1 used with two different arities.
        let p = Program::from_rules(vec![
            Rule::new(atom("p1", &["X", "Y"]), vec![atom("p0", &["X", "Y"])], None),
            Rule::new(atom("p2", &["X"]), vec![atom("p1", &["X"])], None),
        ]);
        let d = validate(&p);
        assert!(d.iter().any(|d| matches!(
            &d.kind,
            DiagnosticKind::ArityMismatch { predicate, expected: 2, found: 1 } if &**predicate == "p1"
        )));
    }

    #[test]
    fn overlap_and_zero_slide() {
        let mut p = Program::from_rules(vec![Rule::new(
            atom("h", &["X"]),
            vec![atom("b", &["X"])],
            Some(WindowSpec::new(10, 0)),
        )]);
        p.idb_predicates.insert("b".into());
        let kinds: Vec<_> = validate(&p).into_iter().map(|d| d.kind).collect();
        assert!(kinds.contains(&DiagnosticKind::EdbIdbOverlap("b".into())));
        assert!(kinds.contains(&DiagnosticKind::ZeroSlide));
    }

    #[test]
    fn window_membership_is_half_open() {
        let w = WindowSpec::tumbling(100);
        assert!(!w.contains(250, 150));
        assert!(w.contains(250, 151));
        assert!(w.contains(250, 250));
        assert!(!w.contains(250, 251));
        assert!(!WindowSpec::tumbling(0).contains(5, 5));
        assert!(WindowSpec::tumbling(u64::MAX).contains(u64::MAX, 1));
        assert!(!WindowSpec::tumbling(u64::MAX).contains(u64::MAX, 0));
    }

    #[test]
    fn ground_conversion() {
        let a = atom("p", &["a", "b"]);
        assert!(a.is_ground());
        assert_eq!(a.to_ground().unwrap(), GroundAtom::new("p", &["a", "b"]));
        assert!(atom("p", &["X"]).to_ground().is_none());
    }

    #[test]
    fn constant_display_quotes_when_needed() {
        assert_eq!(Term::constant("rainObs").to_string(), "rainObs");
        assert_eq!(Term::constant("Foo").to_string(), "\"Foo\"");
        assert_eq!(Term::constant("a b\"").to_string(), "\"a b\\\"\"");
        assert_eq!(Term::constant("42").to_string(), "42");
    }
}
