//! Query graphs: grounded entities, existential variables, one lambda
//! (answer) variable, and relation edges between them.
//!
//! Constraints are ordinary edges whose other endpoint is a grounded entity
//! distinct from the topic. An edge `u -r-> v` with `reversed` set matches the
//! KG triple `(v, r, u)`, i.e. it walks against the stored direction.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationId, Triple};
use crate::tokens;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QgNode {
    Grounded(EntityId),
    Existential(String),
    Lambda,
}

impl QgNode {
    pub fn is_variable(&self) -> bool {
        !matches!(self, QgNode::Grounded(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QgEdge {
    pub from: usize,
    pub relation: RelationId,
    pub to: usize,
    pub reversed: bool,
}

impl QgEdge {
    /// Node playing the KG head role.
    pub fn head(&self) -> usize {
        if self.reversed {
            self.to
        } else {
            self.from
        }
    }

    /// Node playing the KG tail role.
    pub fn tail(&self) -> usize {
        if self.reversed {
            self.from
        } else {
            self.to
        }
    }

    pub fn other(&self, node: usize) -> usize {
        if node == self.from {
            self.to
        } else {
            self.from
        }
    }

    /// Whether walking this edge starting at `node` goes against the KG
    /// direction.
    pub fn reversed_from(&self, node: usize) -> bool {
        if node == self.from {
            self.reversed
        } else {
            !self.reversed
        }
    }
}

/// A constraint edge for [`QueryGraph::build_chain`]: chain node `at`
/// (0 = topic, last = lambda) points through `relation` to `value`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Constraint {
    pub at: usize,
    pub relation: RelationId,
    pub value: EntityId,
}

#[derive(Debug, thiserror::Error)]
pub enum QgError {
    #[error("invalid query graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kg(#[from] KgError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, QgError> {
    Err(QgError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGraph {
    nodes: Vec<QgNode>,
    edges: Vec<QgEdge>,
    topic: usize,
}

const VAR_NAMES: [&str; 3] = ["y", "z", "w"];

fn positional_name(k: usize) -> String {
    VAR_NAMES
        .get(k)
        .map(|s| (*s).to_owned())
        .unwrap_or_else(|| format!("v{k}"))
}

impl QueryGraph {
    /// Validates and assembles a graph. Requirements: endpoints in range, no
    /// self-loops, exactly one lambda, the topic is grounded, grounded
    /// entities and existential names are distinct, and the graph is
    /// connected.
    pub fn new(nodes: Vec<QgNode>, edges: Vec<QgEdge>, topic: usize) -> Result<Self, QgError> {
        if !matches!(nodes.get(topic), Some(QgNode::Grounded(_))) {
            return invalid("topic must be a grounded node");
        }
        let lambdas = nodes.iter().filter(|n| **n == QgNode::Lambda).count();
        if lambdas != 1 {
            return invalid(format!("expected exactly one lambda node, found {lambdas}"));
        }
        let mut grounded = BTreeSet::new();
        let mut names = BTreeSet::new();
        for n in &nodes {
            let fresh = match n {
                QgNode::Grounded(e) => grounded.insert(*e),
                QgNode::Existential(name) => names.insert(name.as_str()),
                QgNode::Lambda => true,
            };
            if !fresh {
                return invalid(format!("duplicate node {n:?}"));
            }
        }
        for e in &edges {
            if e.from >= nodes.len() || e.to >= nodes.len() {
                return invalid("edge endpoint out of range");
            }
            if e.from == e.to {
                return invalid("self-loop edge");
            }
        }
        let g = Self {
            nodes,
            edges,
            topic,
        };
        if g.distances_from(topic).iter().any(Option::is_none) {
            return invalid("graph is not connected");
        }
        Ok(g)
    }

    /// A chain from `topic` through `hops` ending at the lambda node, plus one
    /// forward constraint edge per entry of `constraints`.
    pub fn build_chain(
        topic: EntityId,
        hops: &[(RelationId, bool)],
        constraints: &[Constraint],
    ) -> Result<Self, QgError> {
        if hops.is_empty() {
            return invalid("a chain needs at least one hop");
        }
        let mut nodes = vec![QgNode::Grounded(topic)];
        for i in 1..hops.len() {
            nodes.push(QgNode::Existential(positional_name(i - 1)));
        }
        nodes.push(QgNode::Lambda);
        let mut edges: Vec<QgEdge> = hops
            .iter()
            .enumerate()
            .map(|(i, &(relation, reversed))| QgEdge {
                from: i,
                relation,
                to: i + 1,
                reversed,
            })
            .collect();
        for c in constraints {
            if c.at > hops.len() {
                return invalid(format!("constraint hop index {} out of range", c.at));
            }
            nodes.push(QgNode::Grounded(c.value));
            edges.push(QgEdge {
                from: c.at,
                relation: c.relation,
                to: nodes.len() - 1,
                reversed: false,
            });
        }
        Self::new(nodes, edges, 0)
    }

    /// Returns a copy with one more grounded node `value` attached to `at`.
    pub fn with_constraint(
        &self,
        at: usize,
        relation: RelationId,
        value: EntityId,
        reversed: bool,
    ) -> Result<Self, QgError> {
        let mut nodes = self.nodes.clone();
        let mut edges = self.edges.clone();
        nodes.push(QgNode::Grounded(value));
        edges.push(QgEdge {
            from: at,
            relation,
            to: nodes.len() - 1,
            reversed,
        });
        Self::new(nodes, edges, self.topic)
    }

    pub fn nodes(&self) -> &[QgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[QgEdge] {
        &self.edges
    }

    pub fn topic(&self) -> usize {
        self.topic
    }

    pub fn topic_entity(&self) -> EntityId {
        match self.nodes[self.topic] {
            QgNode::Grounded(e) => e,
            _ => unreachable!("validated on construction"),
        }
    }

    pub fn lambda(&self) -> usize {
        self.nodes
            .iter()
            .position(|n| *n == QgNode::Lambda)
            .expect("validated on construction")
    }

    /// An edge touching a grounded node other than the topic.
    pub fn is_constraint_edge(&self, edge: &QgEdge) -> bool {
        [edge.from, edge.to]
            .iter()
            .any(|&n| n != self.topic && !self.nodes[n].is_variable())
    }

    pub fn relations(&self) -> impl Iterator<Item = RelationId> + '_ {
        self.edges.iter().map(|e| e.relation)
    }

    fn incident(&self, node: usize) -> impl Iterator<Item = (usize, &QgEdge)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.from == node || e.to == node)
    }

    fn distances_from(&self, start: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.nodes.len()];
        dist[start] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for (_, e) in self.incident(u) {
                let v = e.other(u);
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Shortest topic-to-lambda walk as `(edge index, start node)` pairs,
    /// preferring earlier edges on ties.
    pub fn main_path(&self) -> Vec<(usize, usize)> {
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; self.nodes.len()];
        let mut seen = vec![false; self.nodes.len()];
        seen[self.topic] = true;
        let mut queue = VecDeque::from([self.topic]);
        while let Some(u) = queue.pop_front() {
            for (i, e) in self.incident(u) {
                let v = e.other(u);
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some((i, u));
                    queue.push_back(v);
                }
            }
        }
        let mut path = Vec::new();
        let mut cur = self.lambda();
        while let Some((edge, prev)) = parent[cur] {
            path.push((edge, prev));
            cur = prev;
        }
        path.reverse();
        path
    }

    /// Number of edges between topic and lambda.
    pub fn hops(&self) -> usize {
        self.main_path().len()
    }

    /// Position-based variable names: `x` for the lambda, `y`, `z`, `w`, ...
    /// for existentials in main-path order, then the rest in node order.
    pub fn variable_names(&self) -> Vec<Option<String>> {
        let mut names: Vec<Option<String>> = vec![None; self.nodes.len()];
        names[self.lambda()] = Some("x".to_owned());
        let mut order: Vec<usize> = self
            .main_path()
            .iter()
            .map(|&(edge, from)| self.edges[edge].other(from))
            .collect();
        order.extend(0..self.nodes.len());
        let mut k = 0;
        for n in order {
            if names[n].is_none() && matches!(self.nodes[n], QgNode::Existential(_)) {
                names[n] = Some(positional_name(k));
                k += 1;
            }
        }
        names
    }

    /// A string that is equal for two graphs exactly when they are the same
    /// up to renaming existentials and reordering nodes and edges.
    ///
    /// Edges are written in KG direction, so a reversed edge and the forward
    /// edge with swapped endpoints coincide.
    pub fn canonical(&self) -> String {
        let existentials: Vec<usize> = (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i], QgNode::Existential(_)))
            .collect();
        let mut labels: Vec<String> = self
            .nodes
            .iter()
            .map(|n| match n {
                QgNode::Grounded(e) => format!("e{}", e.0),
                QgNode::Lambda => "?a".to_owned(),
                QgNode::Existential(_) => String::new(),
            })
            .collect();
        let prefix = format!("T=e{}|", self.topic_entity().0);
        let mut best: Option<String> = None;
        for_each_permutation(existentials.len(), &mut |perm| {
            for (slot, &node) in existentials.iter().enumerate() {
                labels[node] = format!("?v{}", perm[slot]);
            }
            let mut parts: Vec<String> = self
                .edges
                .iter()
                .map(|e| {
                    format!(
                        "{} r{} {}",
                        labels[e.head()],
                        e.relation.0,
                        labels[e.tail()]
                    )
                })
                .collect();
            parts.sort_unstable();
            let s = prefix.clone() + &parts.join(";");
            if best.as_ref().is_none_or(|b| s < *b) {
                best = Some(s);
            }
        });
        best.unwrap_or(prefix)
    }

    fn node_unit<'a>(
        &self,
        kg: &'a KnowledgeGraph,
        names: &'a [Option<String>],
        n: usize,
    ) -> Result<&'a str, KgError> {
        match &self.nodes[n] {
            QgNode::Grounded(e) => kg.entity_symbol(*e),
            _ => Ok(names[n].as_deref().expect("every variable is named")),
        }
    }

    /// Linearizes the graph: topic, then the main path as relation fragments
    /// (with `reverse` for backward steps) each followed by the reached
    /// node, then remaining edges in insertion order; wrapped in
    /// `[CLS]` ... `[SEP]`.
    pub fn serialize_tokens(&self, kg: &KnowledgeGraph) -> Result<Vec<String>, KgError> {
        let names = self.variable_names();
        let mut units: Vec<&str> = vec![kg.entity_symbol(self.topic_entity())?];
        let path = self.main_path();
        let mut on_path = vec![false; self.edges.len()];
        for &(i, from) in &path {
            on_path[i] = true;
            let e = &self.edges[i];
            units.push(kg.relation_symbol(e.relation)?);
            if e.reversed_from(from) {
                units.push("reverse");
            }
            units.push(self.node_unit(kg, &names, e.other(from))?);
        }
        for (i, e) in self.edges.iter().enumerate() {
            if on_path[i] {
                continue;
            }
            // read constraints from the variable side
            let start = if self.nodes[e.from].is_variable() || !self.nodes[e.to].is_variable() {
                e.from
            } else {
                e.to
            };
            units.push(self.node_unit(kg, &names, start)?);
            units.push(kg.relation_symbol(e.relation)?);
            if e.reversed_from(start) {
                units.push("reverse");
            }
            units.push(self.node_unit(kg, &names, e.other(start))?);
        }
        Ok(tokens::tokenize_units(units))
    }

    fn check_ids(&self, kg: &KnowledgeGraph) -> Result<(), KgError> {
        for n in &self.nodes {
            if let QgNode::Grounded(e) = n {
                kg.check_entity(*e)?;
            }
        }
        for e in &self.edges {
            kg.check_relation(e.relation)?;
        }
        Ok(())
    }

    /// All lambda values over bindings that satisfy every edge.
    ///
    /// Backtracking join: repeatedly take the first unsatisfied edge (in
    /// insertion order) with a bound endpoint; grounded nodes start bound.
    pub fn execute(&self, kg: &KnowledgeGraph) -> Result<BTreeSet<EntityId>, KgError> {
        self.check_ids(kg)?;
        let mut binding: Vec<Option<EntityId>> = self
            .nodes
            .iter()
            .map(|n| match n {
                QgNode::Grounded(e) => Some(*e),
                _ => None,
            })
            .collect();
        let mut done = vec![false; self.edges.len()];
        let mut answers = BTreeSet::new();
        self.join(kg, &mut binding, &mut done, &mut answers)?;
        Ok(answers)
    }

    fn join(
        &self,
        kg: &KnowledgeGraph,
        binding: &mut [Option<EntityId>],
        done: &mut [bool],
        answers: &mut BTreeSet<EntityId>,
    ) -> Result<(), KgError> {
        let next = (0..self.edges.len()).find(|&i| {
            !done[i]
                && (binding[self.edges[i].from].is_some() || binding[self.edges[i].to].is_some())
        });
        let Some(i) = next else {
            if let Some(x) = binding[self.lambda()] {
                answers.insert(x);
            }
            return Ok(());
        };
        let e = self.edges[i];
        done[i] = true;
        match (binding[e.head()], binding[e.tail()]) {
            (Some(h), Some(t)) => {
                if kg.has_triple(Triple::new(h, e.relation, t))? {
                    self.join(kg, binding, done, answers)?;
                }
            }
            (Some(h), None) => {
                let tails: Vec<EntityId> = kg.neighbors(h, e.relation, false)?.collect();
                for t in tails {
                    binding[e.tail()] = Some(t);
                    self.join(kg, binding, done, answers)?;
                }
                binding[e.tail()] = None;
            }
            (None, Some(t)) => {
                let heads: Vec<EntityId> = kg.neighbors(t, e.relation, true)?.collect();
                for h in heads {
                    binding[e.head()] = Some(h);
                    self.join(kg, binding, done, answers)?;
                }
                binding[e.head()] = None;
            }
            (None, None) => unreachable!("edge selected with a bound endpoint"),
        }
        done[i] = false;
        Ok(())
    }

    /// Renders a `SELECT DISTINCT ?x` query in the annotation grammar. Main
    /// path patterns come first so the topic is the first grounded term.
    pub fn to_sparql(&self, kg: &KnowledgeGraph) -> Result<String, KgError> {
        let names = self.variable_names();
        let term = |n: usize| -> Result<String, KgError> {
            Ok(match &self.nodes[n] {
                QgNode::Grounded(e) => iri(kg.entity_symbol(*e)?),
                _ => format!("?{}", names[n].as_deref().expect("every variable is named")),
            })
        };
        let mut order: Vec<usize> = self.main_path().iter().map(|&(i, _)| i).collect();
        let rest: Vec<usize> = (0..self.edges.len())
            .filter(|i| !order.contains(i))
            .collect();
        order.extend(rest);
        let mut out = String::from("SELECT DISTINCT ?x WHERE {");
        for i in order {
            let e = &self.edges[i];
            out.push_str(&format!(
                " {} {} {} .",
                term(e.head())?,
                iri(kg.relation_symbol(e.relation)?),
                term(e.tail())?
            ));
        }
        out.push_str(" }");
        Ok(out)
    }
}

/// `:name` when the symbol is a plain name in the grammar, otherwise the
/// bracketed `<...>` form with `\` and `>` escaped.
fn iri(symbol: &str) -> String {
    let plain = symbol.starts_with(|c: char| c.is_alphanumeric() || c == '_')
        && !symbol.ends_with('.')
        && symbol
            .chars()
            .all(|c| !c.is_whitespace() && !"{}()<>#?:\"\\".contains(c));
    if plain {
        format!(":{symbol}")
    } else {
        let mut escaped = symbol.replace('\\', "\\\\").replace('>', "\\>");
        // a leading space or `=` would read as a `<` or `<=` operator
        if escaped.starts_with(|c: char| c.is_whitespace() || c == '=') {
            escaped.insert(0, '\\');
        }
        format!("<{escaped}>")
    }
}

/// Calls `f` with every permutation of `0..n` (Heap's algorithm).
pub(crate) fn for_each_permutation(n: usize, f: &mut dyn FnMut(&[usize])) {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    f(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            f(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}
