//! Local independence graphs.
//!
//! Nodes are modules or baseline variables; an edge `u -> v` says that the
//! short-term behaviour of `v` may depend on the history of `u`. Graphs may be
//! cyclic. Self-dependence is implicit, so self-loops carry no information
//! and are dropped when parsing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::scenario::ScenarioSpec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("missing timestamp for baseline node `{0}`")]
    MissingTimestamp(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalIndependenceGraph {
    nodes: BTreeMap<String, Option<f64>>,
    edges: BTreeSet<(String, String)>,
}

fn valid_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl LocalIndependenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: &str, timestamp: Option<f64>) {
        let entry = self.nodes.entry(name.to_string()).or_insert(None);
        if timestamp.is_some() {
            *entry = timestamp;
        }
    }

    pub fn add_edge(&mut self, from: &str, to: &str) {
        self.add_node(from, None);
        self.add_node(to, None);
        if from != to {
            self.edges.insert((from.to_string(), to.to_string()));
        }
    }

    /// Parses the text format: `node NAME [t=<float>]` declarations,
    /// `from -> to` edges and `#` comments. Nodes named in edges are
    /// declared implicitly.
    pub fn parse(text: &str) -> Result<Self, GraphError> {
        let mut g = Self::new();
        for (k, raw) in text.lines().enumerate() {
            let line_no = k + 1;
            let err = |msg: String| GraphError::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("node ") {
                let mut parts = rest.split_whitespace();
                let name = parts.next().ok_or_else(|| err("missing node name".into()))?;
                if !valid_name(name) {
                    return Err(err(format!("invalid node name `{name}`")));
                }
                let mut ts = None;
                for attr in parts {
                    let value = attr
                        .strip_prefix("t=")
                        .ok_or_else(|| err(format!("unknown attribute `{attr}`")))?;
                    let t: f64 = value.parse().map_err(|_| err(format!("invalid timestamp `{value}`")))?;
                    if !t.is_finite() {
                        return Err(err(format!("invalid timestamp `{value}`")));
                    }
                    ts = Some(t);
                }
                g.add_node(name, ts);
            } else if let Some((from, to)) = line.split_once("->") {
                let (from, to) = (from.trim(), to.trim());
                for name in [from, to] {
                    if !valid_name(name) {
                        return Err(err(format!("invalid node name `{name}`")));
                    }
                }
                g.add_edge(from, to);
            } else {
                return Err(err(format!("expected `node` or `->`, found `{line}`")));
            }
        }
        Ok(g)
    }

    pub fn contains(&self, v: &str) -> bool {
        self.nodes.contains_key(v)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn timestamp(&self, v: &str) -> Option<f64> {
        self.nodes.get(v).copied().flatten()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    fn require(&self, v: &str) -> Result<(), GraphError> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(v.to_string()))
        }
    }

    pub fn parents(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        self.require(v)?;
        Ok(self
            .edges
            .iter()
            .filter(|(_, to)| to == v)
            .map(|(from, _)| from.clone())
            .collect())
    }

    /// `cl(v)`: `v` together with its parents.
    pub fn closure(&self, v: &str) -> Result<BTreeSet<String>, GraphError> {
        let mut c = self.parents(v)?;
        c.insert(v.to_string());
        Ok(c)
    }

    /// True iff no edge runs from any source into `target`.
    pub fn is_locally_independent<S: AsRef<str>>(&self, sources: &[S], target: &str) -> Result<bool, GraphError> {
        self.require(target)?;
        for s in sources {
            self.require(s.as_ref())?;
        }
        Ok(!sources
            .iter()
            .any(|s| self.edges.contains(&(s.as_ref().to_string(), target.to_string()))))
    }

    /// Orders `ids` by baseline timestamp, ties broken by name. A timestamp
    /// in `timestamps` overrides the one declared in the graph.
    pub fn baseline_order<S: AsRef<str>>(
        &self,
        ids: &[S],
        timestamps: &BTreeMap<String, f64>,
    ) -> Result<Vec<String>, GraphError> {
        let mut keyed = Vec::with_capacity(ids.len());
        for id in ids {
            let id = id.as_ref();
            self.require(id)?;
            let t = timestamps
                .get(id)
                .copied()
                .or_else(|| self.timestamp(id))
                .ok_or_else(|| GraphError::MissingTimestamp(id.to_string()))?;
            keyed.push((t, id.to_string()));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        Ok(keyed.into_iter().map(|(_, id)| id).collect())
    }
}

impl fmt::Display for LocalIndependenceGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, ts) in &self.nodes {
            match ts {
                Some(t) => writeln!(f, "node {name} t={t}")?,
                None => writeln!(f, "node {name}")?,
            }
        }
        for (a, b) in &self.edges {
            writeln!(f, "{a} -> {b}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependencyEntry {
    pub node: String,
    pub declared: BTreeSet<String>,
    pub closure: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DependencyReport {
    pub entries: Vec<DependencyEntry>,
    /// `(node, dependency)` pairs where the dependency is outside `cl(node)`.
    pub violations: Vec<(String, String)>,
    /// Scenario variables that are not graph nodes.
    pub missing_nodes: Vec<String>,
}

impl DependencyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.missing_nodes.is_empty()
    }
}

/// Checks every declared dependency set of `scenario` (intensities, jump
/// probabilities and baseline tables) against the graph closure.
pub fn validate_dependencies(graph: &LocalIndependenceGraph, scenario: &ScenarioSpec) -> DependencyReport {
    let mut report = DependencyReport::default();
    for (node, declared) in scenario.declared_dependencies() {
        let Ok(closure) = graph.closure(&node) else {
            report.missing_nodes.push(node);
            continue;
        };
        for d in &declared {
            if !closure.contains(d) {
                report.violations.push((node.clone(), d.clone()));
            }
        }
        report.entries.push(DependencyEntry {
            node,
            declared,
            closure,
        });
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DYNAMIC_GRAPH: &str = "\
# controlled direct effect, dynamic version
node W t=0
node A t=1
node L t=2
node K
node B
node C
W -> L
W -> B
A -> L
A -> K
A -> B
A -> C
L -> K
L -> B
K -> B
";

    #[test]
    fn parents_and_closure() {
        let g = LocalIndependenceGraph::parse(DYNAMIC_GRAPH).unwrap();
        let c: BTreeSet<String> = ["A".to_string()].into();
        assert_eq!(g.parents("C").unwrap(), c);
        let cl: BTreeSet<String> = ["A".to_string(), "C".to_string()].into();
        assert_eq!(g.closure("C").unwrap(), cl);
        assert!(g.parents("W").unwrap().is_empty());
        assert_eq!(g.closure("W").unwrap().len(), 1);
        assert_eq!(g.parents("Z"), Err(GraphError::UnknownNode("Z".into())));
    }

    #[test]
    fn fully_connected_and_cyclic() {
        let g = LocalIndependenceGraph::parse("a->b\nb->a\na->c\nc->a\nb->c\nc->b").unwrap();
        for v in ["a", "b", "c"] {
            let p = g.parents(v).unwrap();
            assert_eq!(p.len(), 2);
            assert!(!p.contains(v));
        }
        let g = LocalIndependenceGraph::parse("u -> v\nv -> u").unwrap();
        let cl: BTreeSet<String> = ["u".to_string(), "v".to_string()].into();
        assert_eq!(g.closure("u").unwrap(), cl);
    }

    #[test]
    fn self_loops_are_implicit() {
        let g = LocalIndependenceGraph::parse("K -> K").unwrap();
        assert!(g.parents("K").unwrap().is_empty());
    }

    #[test]
    fn local_independence_queries() {
        let g = LocalIndependenceGraph::parse(DYNAMIC_GRAPH).unwrap();
        assert!(g.is_locally_independent(&["L", "K", "B", "W"], "C").unwrap());
        assert!(g.is_locally_independent::<&str>(&[], "C").unwrap());
        assert!(!g.is_locally_independent(&["A"], "C").unwrap());
        assert!(g.is_locally_independent(&["Q"], "C").is_err());
    }

    #[test]
    fn baseline_order_static_example() {
        let g = LocalIndependenceGraph::parse("node W t=0\nnode A t=1\nnode L t=2\nnode K t=3\nnode B t=4").unwrap();
        let order = g.baseline_order(&["B", "K", "L", "A", "W"], &BTreeMap::new()).unwrap();
        assert_eq!(order, vec!["W", "A", "L", "K", "B"]);
        assert_eq!(g.baseline_order(&["L"], &BTreeMap::new()).unwrap(), vec!["L"]);
    }

    #[test]
    fn baseline_order_ties_are_lexicographic() {
        let g = LocalIndependenceGraph::parse("node y t=1\nnode x t=1\nnode a t=2").unwrap();
        let order = g.baseline_order(&["a", "y", "x"], &BTreeMap::new()).unwrap();
        assert_eq!(order, vec!["x", "y", "a"]);
    }

    #[test]
    fn baseline_order_requires_timestamps() {
        let g = LocalIndependenceGraph::parse("node x\nnode y t=0").unwrap();
        assert_eq!(
            g.baseline_order(&["x", "y"], &BTreeMap::new()),
            Err(GraphError::MissingTimestamp("x".into()))
        );
        let ts: BTreeMap<String, f64> = [("x".to_string(), -1.0)].into();
        assert_eq!(g.baseline_order(&["x", "y"], &ts).unwrap(), vec!["x", "y"]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = LocalIndependenceGraph::parse("node A\nA => B").unwrap_err();
        assert!(matches!(err, GraphError::Parse { line: 2, .. }));
        assert!(LocalIndependenceGraph::parse("node A t=abc").is_err());
    }

    #[test]
    fn display_round_trips() {
        let g = LocalIndependenceGraph::parse(DYNAMIC_GRAPH).unwrap();
        let again = LocalIndependenceGraph::parse(&g.to_string()).unwrap();
        assert_eq!(g, again);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn closure_contains_parents_and_self(edges in proptest::collection::vec((0u8..5, 0u8..5), 0..15)) {
                let mut g = LocalIndependenceGraph::new();
                for v in 0..5u8 { g.add_node(&format!("n{v}"), None); }
                for (a, b) in &edges { g.add_edge(&format!("n{a}"), &format!("n{b}")); }
                for v in 0..5u8 {
                    let name = format!("n{v}");
                    let cl = g.closure(&name).unwrap();
                    prop_assert!(cl.contains(&name));
                    prop_assert!(g.parents(&name).unwrap().is_subset(&cl));
                }
            }

            #[test]
            fn local_independence_is_monotone(
                edges in proptest::collection::vec((0u8..5, 0u8..5), 0..15),
                mask in 0u8..32,
                sub in 0u8..32,
            ) {
                let mut g = LocalIndependenceGraph::new();
                for v in 0..5u8 { g.add_node(&format!("n{v}"), None); }
                for (a, b) in &edges { g.add_edge(&format!("n{a}"), &format!("n{b}")); }
                let set: Vec<String> = (0..5u8).filter(|i| mask & (1 << i) != 0).map(|i| format!("n{i}")).collect();
                let subset: Vec<String> = (0..5u8).filter(|i| mask & sub & (1 << i) != 0).map(|i| format!("n{i}")).collect();
                for target in 0..5u8 {
                    let t = format!("n{target}");
                    if g.is_locally_independent(&set, &t).unwrap() {
                        prop_assert!(g.is_locally_independent(&subset, &t).unwrap());
                    }
                }
            }
        }
    }
}
