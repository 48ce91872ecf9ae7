//! Static analysis and compilation of programs into operator plans.

mod compile;
mod explain;
mod rule;

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{Program, Value};

pub use compile::{compile, CompileError, NodeId, OpKind, Operator, OperatorPlan, PredicateKind, Target};
pub use explain::explain;
pub use rule::{AtomScan, Filter, HeadTerm, JoinStep, RulePlan};

/// Predicate dependency graph: an edge `body → head` for every rule.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DepGraph {
    pub nodes: BTreeSet<Value>,
    pub edges: BTreeSet<(Value, Value)>,
}

impl DepGraph {
    pub fn successors<'a>(&'a self, node: &'a Value) -> impl Iterator<Item = &'a Value> + 'a {
        self.edges
            .range((node.clone(), Value::from(""))..)
            .take_while(move |(from, _)| from == node)
            .map(|(_, to)| to)
    }
}

pub fn build_dep_graph(program: &Program) -> DepGraph {
    let mut graph = DepGraph {
        nodes: program.predicates(),
        edges: BTreeSet::new(),
    };
    for rule in &program.rules {
        graph.nodes.insert(rule.head.predicate.clone());
        for atom in &rule.body {
            graph.nodes.insert(atom.predicate.clone());
            graph
                .edges
                .insert((atom.predicate.clone(), rule.head.predicate.clone()));
        }
    }
    graph
}

/// One strongly connected component of the dependency graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scc {
    /// Position in [`SccPlan::components`].
    pub id: usize,
    pub predicates: BTreeSet<Value>,
    /// Indices of the rules whose head lies in this component.
    pub rules: Vec<usize>,
    pub recursive: bool,
    /// Condensation level. Components sharing a group have no path between
    /// them and can be evaluated concurrently.
    pub group: usize,
}

/// Components in a topological order of the condensation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SccPlan {
    pub components: Vec<Scc>,
}

impl SccPlan {
    pub fn component_of(&self, predicate: &str) -> Option<&Scc> {
        self.components.iter().find(|c| c.predicates.contains(predicate))
    }

    /// Components bucketed by parallel group, in evaluation order.
    pub fn groups(&self) -> Vec<Vec<&Scc>> {
        let mut out: Vec<Vec<&Scc>> = Vec::new();
        for c in &self.components {
            if out.len() <= c.group {
                out.resize_with(c.group + 1, Vec::new);
            }
            out[c.group].push(c);
        }
        out
    }
}

/// Tarjan's algorithm, iterative. Components come out in reverse
/// topological order.
fn tarjan(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<usize>> {
    const UNVISITED: usize = usize::MAX;
    let mut index = vec![UNVISITED; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut out = Vec::new();
    let mut next = 0;
    for root in 0..n {
        if index[root] != UNVISITED {
            continue;
        }
        // (node, next edge position)
        let mut work = vec![(root, 0usize)];
        index[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&(v, edge)) = work.last() {
            if let Some(&w) = adj[v].get(edge) {
                if let Some(top) = work.last_mut() {
                    top.1 += 1;
                }
                if index[w] == UNVISITED {
                    index[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
                continue;
            }
            work.pop();
            if let Some(&(parent, _)) = work.last() {
                low[parent] = low[parent].min(low[v]);
            }
            if low[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comp.sort_unstable();
                out.push(comp);
            }
        }
    }
    out
}

pub fn scc_plan(graph: &DepGraph, program: &Program) -> SccPlan {
    let names: Vec<&Value> = graph.nodes.iter().collect();
    let pos: BTreeMap<&Value, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let mut adj = vec![Vec::new(); names.len()];
    for (from, to) in &graph.edges {
        adj[pos[from]].push(pos[to]);
    }
    let comps = tarjan(names.len(), &adj);

    let mut comp_of = vec![0; names.len()];
    for (c, members) in comps.iter().enumerate() {
        for &m in members {
            comp_of[m] = c;
        }
    }
    // Reverse Tarjan order is topological; assign longest-path levels.
    let mut level = vec![0usize; comps.len()];
    for c in (0..comps.len()).rev() {
        for &m in &comps[c] {
            for &w in &adj[m] {
                let d = comp_of[w];
                if d != c {
                    level[d] = level[d].max(level[c] + 1);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..comps.len()).collect();
    order.sort_by_key(|&c| (level[c], comps[c][0]));

    let components = order
        .into_iter()
        .enumerate()
        .map(|(id, c)| {
            let predicates: BTreeSet<Value> = comps[c].iter().map(|&i| names[i].clone()).collect();
            let recursive = comps[c].len() > 1 || comps[c].iter().any(|&i| adj[i].contains(&i));
            let rules = program
                .rules
                .iter()
                .enumerate()
                .filter(|(_, r)| predicates.contains(&r.head.predicate))
                .map(|(i, _)| i)
                .collect();
            Scc {
                id,
                predicates,
                rules,
                recursive,
                group: level[c],
            }
        })
        .collect();
    SccPlan { components }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_program;

    fn v(s: &str) -> Value {
        Value::from(s)
    }

    const TC: &str = "p2(X,Y) :- p0(X,Y).\np1(X,Y) :- p2(X,Y), p0(Y,Z).\np2(X,Y) :- p1(X,Y), p0(Y,Z).\n";

    #[test]
    fn tc_edges() {
        let g = build_dep_graph(&parse_program(TC).unwrap());
        let expected: BTreeSet<_> = [("p0", "p2"), ("p2", "p1"), ("p0", "p1"), ("p1", "p2")]
            .into_iter()
            .map(|(a, b)| (v(a), v(b)))
            .collect();
        assert_eq!(g.edges, expected);
        assert_eq!(g.successors(&v("p0")).count(), 2);
    }

    #[test]
    fn single_rule_and_empty_graph() {
        let g = build_dep_graph(&parse_program("h(X) :- b(X).").unwrap());
        assert_eq!(g.edges.len(), 1);
        let g = build_dep_graph(&parse_program("@edb b/1.\n@idb h/1.").unwrap());
        assert_eq!(g.nodes.len(), 2);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn tc_scc() {
        let p = parse_program(TC).unwrap();
        let plan = scc_plan(&build_dep_graph(&p), &p);
        assert_eq!(plan.components.len(), 2);
        assert_eq!(plan.components[0].predicates, [v("p0")].into_iter().collect());
        assert!(!plan.components[0].recursive);
        assert_eq!(plan.components[1].predicates, [v("p1"), v("p2")].into_iter().collect());
        assert!(plan.components[1].recursive);
        assert_eq!(plan.components[1].rules, vec![0, 1, 2]);
    }

    #[test]
    fn chain_order() {
        let p = parse_program("b(X) :- a(X).\nc(X) :- b(X).").unwrap();
        let plan = scc_plan(&build_dep_graph(&p), &p);
        let names: Vec<_> = plan
            .components
            .iter()
            .map(|c| c.predicates.iter().next().unwrap().to_string())
            .collect();
        assert_eq!(names, ["a", "b", "c"]);
        assert_eq!(plan.components.iter().map(|c| c.group).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn disjoint_rules_share_group() {
        let p = parse_program("h1(X) :- b1(X).\nh2(X) :- b2(X).").unwrap();
        let plan = scc_plan(&build_dep_graph(&p), &p);
        let h1 = plan.component_of("h1").unwrap();
        let h2 = plan.component_of("h2").unwrap();
        assert_eq!(h1.group, h2.group);
        assert_eq!(plan.groups().len(), 2);
    }

    #[test]
    fn self_loop_is_recursive() {
        let p = parse_program("r(X,Z) :- r(X,Y), e(Y,Z).\nr(X,Y) :- e(X,Y).").unwrap();
        let plan = scc_plan(&build_dep_graph(&p), &p);
        assert!(plan.component_of("r").unwrap().recursive);
        assert!(!plan.component_of("e").unwrap().recursive);
    }
}
