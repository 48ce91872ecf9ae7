use std::fmt::Write as _;

use super::compile::{OpKind, Operator, OperatorPlan, PredicateKind};
use super::rule::{Filter, HeadTerm};
use crate::model::{write_constant, Value};

fn vars(list: &[Value]) -> String {
    let names: Vec<&str> = list.iter().map(|v| &**v).collect();
    format!("({})", names.join(","))
}

fn constant(value: &str) -> String {
    let mut s = String::new();
    let _ = write_constant(&mut s, value);
    s
}

fn describe(kind: &OpKind) -> String {
    match kind {
        OpKind::Source { predicate } => format!("Source {predicate}"),
        OpKind::Select { scan } => {
            let filters: Vec<String> = scan
                .filters
                .iter()
                .map(|f| match f {
                    Filter::Equals { position, value } => format!("#{position}={}", constant(value)),
                    Filter::SameAs { position, earlier } => format!("#{position}=#{earlier}"),
                })
                .collect();
            format!(
                "Select {}[{}] -> {}",
                scan.predicate,
                filters.join(" "),
                vars(&scan.vars)
            )
        }
        OpKind::Window(w) => format!("Window {}ms slide {}ms", w.length_ms, w.slide_ms),
        OpKind::Join { step } => {
            let keys: Vec<Value> = step.left_keys.iter().map(|&i| step.vars[i].clone()).collect();
            if keys.is_empty() {
                format!("Join cross -> {}", vars(&step.vars))
            } else {
                format!("Join on {} -> {}", vars(&keys), vars(&step.vars))
            }
        }
        OpKind::Project {
            predicate,
            rule,
            schema,
            head,
        } => {
            let terms: Vec<String> = head
                .iter()
                .map(|h| match h {
                    HeadTerm::Column(i) => schema[*i].to_string(),
                    HeadTerm::Constant(c) => constant(c),
                })
                .collect();
            format!("Project {predicate}({}) rule {rule}", terms.join(","))
        }
        OpKind::Union { predicate } => format!("Union {predicate}"),
        OpKind::Distinct { predicate } => format!("Distinct {predicate}"),
        OpKind::Fixpoint { scc, predicates, .. } => {
            let names: Vec<&str> = predicates.iter().map(|p| &**p).collect();
            format!("Fixpoint scc #{scc} {{{}}}", names.join(", "))
        }
        OpKind::Input { predicate } => format!("Input {predicate}"),
        OpKind::Feedback { predicate } => format!("Feedback {predicate}"),
        OpKind::Extract { predicate } => format!("Extract {predicate}"),
        OpKind::Sink { predicate } => format!("Sink {predicate}"),
    }
}

fn render(out: &mut String, nodes: &[Operator], indent: usize) {
    for n in nodes {
        let _ = write!(out, "{:indent$}n{} {}", "", n.id, describe(&n.kind));
        if !n.inputs.is_empty() {
            let inputs: Vec<String> = n.inputs.iter().map(|i| format!("n{i}")).collect();
            let _ = write!(out, " <- {}", inputs.join(", "));
        }
        out.push('\n');
        if let OpKind::Fixpoint { inner, .. } = &n.kind {
            render(out, inner, indent + 4);
        }
    }
}

/// Deterministic text rendering of a plan: components with their parallel
/// groups, predicate kinds, then the operator DAG.
pub fn explain(plan: &OperatorPlan) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "plan target={}", plan.target);
    out.push_str("components:\n");
    for c in &plan.sccs.components {
        let names: Vec<&str> = c.predicates.iter().map(|p| &**p).collect();
        let _ = write!(out, "  #{} group {} {{{}}}", c.id, c.group, names.join(", "));
        if c.recursive {
            out.push_str(" recursive");
        }
        if !c.rules.is_empty() {
            let rules: Vec<String> = c.rules.iter().map(ToString::to_string).collect();
            let _ = write!(out, " rules [{}]", rules.join(", "));
        }
        out.push('\n');
    }
    out.push_str("predicates:\n");
    for (p, kind) in &plan.kinds {
        let _ = write!(
            out,
            "  {p} {}",
            match kind {
                PredicateKind::Edb => "edb",
                PredicateKind::Stream => "stream",
                PredicateKind::Relation => "relation",
            }
        );
        if let Some(slides) = plan.emit_slides.get(p) {
            let s: Vec<String> = slides.iter().map(|s| format!("{s}ms")).collect();
            let _ = write!(out, " panes every {}", s.join("|"));
        }
        out.push('\n');
    }
    out.push_str("operators:\n");
    render(&mut out, &plan.nodes, 2);
    out
}
