use std::collections::HashMap;

use crate::model::{Rule, Term, Tuple, Value, WindowSpec};

/// A selection predicate over one body atom's argument positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Filter {
    /// `args[position] == value`
    Equals { position: usize, value: Value },
    /// `args[position] == args[earlier]` for a repeated variable.
    SameAs { position: usize, earlier: usize },
}

/// Selection plus binding for one body atom: filters a stored tuple and
/// keeps the first occurrence of each variable, in order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AtomScan {
    pub predicate: Value,
    pub arity: usize,
    pub filters: Vec<Filter>,
    pub columns: Vec<usize>,
    pub vars: Vec<Value>,
}

impl AtomScan {
    fn compile(terms: &[Term], predicate: &Value) -> Self {
        let mut filters = Vec::new();
        let mut columns = Vec::new();
        let mut vars: Vec<Value> = Vec::new();
        for (pos, term) in terms.iter().enumerate() {
            match term {
                Term::Constant(c) => filters.push(Filter::Equals {
                    position: pos,
                    value: c.clone(),
                }),
                Term::Variable(v) => match vars.iter().position(|x| x == v) {
                    Some(i) => filters.push(Filter::SameAs {
                        position: pos,
                        earlier: columns[i],
                    }),
                    None => {
                        vars.push(v.clone());
                        columns.push(pos);
                    }
                },
            }
        }
        AtomScan {
            predicate: predicate.clone(),
            arity: terms.len(),
            filters,
            columns,
            vars,
        }
    }

    /// True when the scan passes tuples through unchanged.
    pub fn is_identity(&self) -> bool {
        self.filters.is_empty() && self.columns.iter().copied().eq(0..self.arity)
    }

    pub fn matches(&self, args: &[Value]) -> bool {
        args.len() == self.arity
            && self.filters.iter().all(|f| match f {
                Filter::Equals { position, value } => args[*position] == *value,
                Filter::SameAs { position, earlier } => args[*position] == args[*earlier],
            })
    }

    pub fn apply(&self, args: &[Value]) -> Option<Tuple> {
        if !self.matches(args) {
            return None;
        }
        Some(self.columns.iter().map(|&c| args[c].clone()).collect())
    }
}

/// Natural join of the accumulated left row with the next atom's row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct JoinStep {
    pub left_keys: Vec<usize>,
    pub right_keys: Vec<usize>,
    /// Right columns carried into the output (the non-key ones).
    pub right_rest: Vec<usize>,
    /// Output schema.
    pub vars: Vec<Value>,
}

impl JoinStep {
    pub fn left_key(&self, row: &[Value]) -> Tuple {
        self.left_keys.iter().map(|&i| row[i].clone()).collect()
    }

    pub fn right_key(&self, row: &[Value]) -> Tuple {
        self.right_keys.iter().map(|&i| row[i].clone()).collect()
    }

    pub fn combine(&self, left: &[Value], right: &[Value]) -> Tuple {
        let mut out = Vec::with_capacity(left.len() + self.right_rest.len());
        out.extend_from_slice(left);
        out.extend(self.right_rest.iter().map(|&i| right[i].clone()));
        out
    }

    pub fn is_cross_product(&self) -> bool {
        self.left_keys.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum HeadTerm {
    Column(usize),
    Constant(Value),
}

/// A rule lowered to scans, a left-deep join chain in body order, and a
/// head projection.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RulePlan {
    pub rule_index: usize,
    pub head_predicate: Value,
    pub scans: Vec<AtomScan>,
    /// `joins[i]` joins the accumulated row with `scans[i + 1]`.
    pub joins: Vec<JoinStep>,
    pub head: Vec<HeadTerm>,
    pub window: Option<WindowSpec>,
}

impl RulePlan {
    /// Lowers a safe rule. Panics if a head variable is unbound, which
    /// `validate` rules out.
    pub fn compile(rule: &Rule, rule_index: usize) -> Self {
        let scans: Vec<AtomScan> = rule
            .body
            .iter()
            .map(|a| AtomScan::compile(&a.terms, &a.predicate))
            .collect();
        let mut schema: Vec<Value> = scans.first().map(|s| s.vars.clone()).unwrap_or_default();
        let mut joins = Vec::new();
        for scan in scans.iter().skip(1) {
            let position: HashMap<&Value, usize> = schema.iter().enumerate().map(|(i, v)| (v, i)).collect();
            let mut step = JoinStep {
                left_keys: Vec::new(),
                right_keys: Vec::new(),
                right_rest: Vec::new(),
                vars: Vec::new(),
            };
            let mut added = Vec::new();
            for (i, v) in scan.vars.iter().enumerate() {
                match position.get(v) {
                    Some(&l) => {
                        step.left_keys.push(l);
                        step.right_keys.push(i);
                    }
                    None => {
                        step.right_rest.push(i);
                        added.push(v.clone());
                    }
                }
            }
            schema.extend(added);
            step.vars = schema.clone();
            joins.push(step);
        }
        let head = rule
            .head
            .terms
            .iter()
            .map(|t| match t {
                Term::Constant(c) => HeadTerm::Constant(c.clone()),
                Term::Variable(v) => HeadTerm::Column(
                    schema
                        .iter()
                        .position(|x| x == v)
                        .unwrap_or_else(|| panic!("unsafe head variable {v}")),
                ),
            })
            .collect();
        RulePlan {
            rule_index,
            head_predicate: rule.head.predicate.clone(),
            scans,
            joins,
            head,
            window: rule.window,
        }
    }

    /// Variables of the fully joined row.
    pub fn schema(&self) -> &[Value] {
        match self.joins.last() {
            Some(j) => &j.vars,
            None => self.scans.first().map(|s| &s.vars[..]).unwrap_or(&[]),
        }
    }

    pub fn project(&self, row: &[Value]) -> Tuple {
        self.head
            .iter()
            .map(|h| match h {
                HeadTerm::Column(i) => row[*i].clone(),
                HeadTerm::Constant(c) => c.clone(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tuple;
    use crate::parser::parse_program;

    #[test]
    fn lowering_listing_rule() {
        let p = parse_program(r#"resIRI(Obs,Sen) :- procedure(Obs,Sen), type(Obs,"rainObs") [window 10s slide 2s]."#)
            .unwrap();
        let plan = RulePlan::compile(&p.rules[0], 0);
        assert!(plan.scans[0].is_identity());
        assert!(!plan.scans[1].is_identity());
        assert_eq!(plan.joins[0].left_keys, vec![0]);
        assert_eq!(plan.joins[0].right_keys, vec![0]);
        assert!(plan.joins[0].right_rest.is_empty());
        assert_eq!(plan.head, vec![HeadTerm::Column(0), HeadTerm::Column(1)]);
    }

    #[test]
    fn repeated_variables_and_constants() {
        let p = parse_program("h(X, \"k\") :- e(X, X, c).").unwrap();
        let plan = RulePlan::compile(&p.rules[0], 0);
        let scan = &plan.scans[0];
        assert_eq!(scan.apply(&tuple(&["a", "a", "c"])), Some(tuple(&["a"])));
        assert_eq!(scan.apply(&tuple(&["a", "b", "c"])), None);
        assert_eq!(scan.apply(&tuple(&["a", "a", "d"])), None);
        assert_eq!(plan.project(&tuple(&["a"])), tuple(&["a", "k"]));
    }

    #[test]
    fn cross_product_has_no_keys() {
        let p = parse_program("h(X,Y) :- a(X), b(Y).").unwrap();
        let plan = RulePlan::compile(&p.rules[0], 0);
        assert!(plan.joins[0].is_cross_product());
        assert_eq!(plan.schema().len(), 2);
    }
}
