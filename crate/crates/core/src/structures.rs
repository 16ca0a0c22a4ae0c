//! Semantic structures: query graphs with entities, relations and variable
//! identities abstracted away, leaving node kinds, undirected edges, and
//! constraint markers.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use crate::query_graph::{for_each_permutation, QgNode, QueryGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    /// Grounded entity.
    E,
    /// Existential variable.
    V,
    /// Answer variable.
    A,
}

impl NodeKind {
    fn symbol(self) -> &'static str {
        match self {
            NodeKind::E => "E",
            NodeKind::V => "v",
            NodeKind::A => "a",
        }
    }
}

impl FromStr for NodeKind {
    type Err = StructureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "E" => Ok(NodeKind::E),
            "v" => Ok(NodeKind::V),
            "a" => Ok(NodeKind::A),
            other => Err(StructureError::Invalid(format!(
                "unknown node kind `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StructureEdge {
    pub from: usize,
    pub to: usize,
    /// Set iff the edge touches an `E` node other than the topic.
    pub constraint: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StructureError {
    #[error("invalid structure: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Clone, Debug)]
pub struct SemanticStructure {
    label: String,
    kinds: Vec<NodeKind>,
    edges: Vec<StructureEdge>,
    topic: usize,
    canonical: String,
}

impl PartialEq for SemanticStructure {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.canonical == other.canonical
    }
}

impl SemanticStructure {
    pub fn new(
        label: impl Into<String>,
        kinds: Vec<NodeKind>,
        edges: Vec<StructureEdge>,
        topic: usize,
    ) -> Result<Self, StructureError> {
        let bad = |m: String| Err(StructureError::Invalid(m));
        if kinds.get(topic) != Some(&NodeKind::E) {
            return bad("topic must be an E node".into());
        }
        let answers = kinds.iter().filter(|&&k| k == NodeKind::A).count();
        if answers != 1 {
            return bad(format!("expected one answer node, found {answers}"));
        }
        for e in &edges {
            if e.from >= kinds.len() || e.to >= kinds.len() || e.from == e.to {
                return bad(format!("bad edge {}-{}", e.from, e.to));
            }
            let touches_constant = [e.from, e.to]
                .iter()
                .any(|&n| n != topic && kinds[n] == NodeKind::E);
            if touches_constant != e.constraint {
                return bad(format!(
                    "edge {}-{} must {}be marked C",
                    e.from,
                    e.to,
                    if touches_constant { "" } else { "not " }
                ));
            }
        }
        let mut s = Self {
            label: label.into(),
            kinds,
            edges,
            topic,
            canonical: String::new(),
        };
        if s.distances().iter().any(Option::is_none) {
            return bad("structure is not connected".into());
        }
        s.canonical = s.compute_canonical();
        Ok(s)
    }

    /// Replaces entities with `E`, existentials with `v`, the lambda with
    /// `a`; relation labels and directions are dropped.
    pub fn abstract_graph(g: &QueryGraph) -> Self {
        let kinds = g
            .nodes()
            .iter()
            .map(|n| match n {
                QgNode::Grounded(_) => NodeKind::E,
                QgNode::Existential(_) => NodeKind::V,
                QgNode::Lambda => NodeKind::A,
            })
            .collect();
        let edges = g
            .edges()
            .iter()
            .map(|e| StructureEdge {
                from: e.from,
                to: e.to,
                constraint: g.is_constraint_edge(e),
            })
            .collect();
        Self::new("abstract", kinds, edges, g.topic())
            .expect("a valid query graph abstracts cleanly")
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn kinds(&self) -> &[NodeKind] {
        &self.kinds
    }

    pub fn edges(&self) -> &[StructureEdge] {
        &self.edges
    }

    pub fn topic(&self) -> usize {
        self.topic
    }

    /// Label-independent canonical form; equal iff the structures are
    /// isomorphic.
    pub fn canonical(&self) -> &str {
        &self.canonical
    }

    pub fn is_isomorphic(&self, other: &SemanticStructure) -> bool {
        self.canonical == other.canonical
    }

    fn answer(&self) -> usize {
        self.kinds
            .iter()
            .position(|&k| k == NodeKind::A)
            .expect("validated")
    }

    fn distances(&self) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.kinds.len()];
        dist[self.topic] = Some(0);
        let mut queue = VecDeque::from([self.topic]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap_or(0);
            for e in &self.edges {
                let v = if e.from == u {
                    e.to
                } else if e.to == u {
                    e.from
                } else {
                    continue;
                };
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Edge distance from the topic to the answer node.
    pub fn hops(&self) -> usize {
        self.distances()[self.answer()].expect("connected")
    }

    pub fn has_constraint(&self) -> bool {
        self.edges.iter().any(|e| e.constraint)
    }

    fn compute_canonical(&self) -> String {
        let others: Vec<usize> = (0..self.kinds.len())
            .filter(|&i| i != self.topic && self.kinds[i] == NodeKind::E)
            .collect();
        let vars: Vec<usize> = (0..self.kinds.len())
            .filter(|&i| self.kinds[i] == NodeKind::V)
            .collect();
        let mut labels: Vec<String> = self.kinds.iter().map(|k| k.symbol().to_owned()).collect();
        labels[self.topic] = "T".to_owned();
        let header = format!("{}E{}v|", others.len() + 1, vars.len());
        let mut best: Option<String> = None;
        for_each_permutation(others.len(), &mut |pe| {
            for (slot, &n) in others.iter().enumerate() {
                labels[n] = format!("E{}", pe[slot]);
            }
            for_each_permutation(vars.len(), &mut |pv| {
                for (slot, &n) in vars.iter().enumerate() {
                    labels[n] = format!("v{}", pv[slot]);
                }
                let mut parts: Vec<String> = self
                    .edges
                    .iter()
                    .map(|e| {
                        let (a, b) = (&labels[e.from], &labels[e.to]);
                        let (a, b) = if a <= b { (a, b) } else { (b, a) };
                        format!("{a}-{b}{}", if e.constraint { "C" } else { "" })
                    })
                    .collect();
                parts.sort_unstable();
                let s = header.clone() + &parts.join(",");
                if best.as_ref().is_none_or(|b| s < *b) {
                    best = Some(s);
                }
            });
        });
        best.unwrap_or(header)
    }

    /// Text form, e.g. `SS4: E a E ; 0-1 1-2C`. Node 0 is the topic.
    pub fn to_line(&self) -> String {
        let mut order: Vec<usize> = vec![self.topic];
        order.extend((0..self.kinds.len()).filter(|&i| i != self.topic));
        let mut pos = vec![0; self.kinds.len()];
        for (p, &n) in order.iter().enumerate() {
            pos[n] = p;
        }
        let kinds: Vec<&str> = order.iter().map(|&n| self.kinds[n].symbol()).collect();
        let edges: Vec<String> = self
            .edges
            .iter()
            .map(|e| {
                format!(
                    "{}-{}{}",
                    pos[e.from],
                    pos[e.to],
                    if e.constraint { "C" } else { "" }
                )
            })
            .collect();
        format!("{}: {} ; {}", self.label, kinds.join(" "), edges.join(" "))
    }

    fn parse_line(line: &str) -> Result<Self, String> {
        let (label, body) = line.split_once(':').ok_or("missing `label:`")?;
        let label = label.trim();
        if label.is_empty() {
            return Err("empty label".into());
        }
        let (kinds, edges) = body
            .split_once(';')
            .ok_or("missing `;` between nodes and edges")?;
        let kinds = kinds
            .split_whitespace()
            .map(|k| k.parse::<NodeKind>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let edges = edges
            .split_whitespace()
            .map(|tok| {
                let (body, constraint) = match tok.strip_suffix('C') {
                    Some(b) => (b, true),
                    None => (tok, false),
                };
                let (a, b) = body
                    .split_once('-')
                    .ok_or_else(|| format!("bad edge `{tok}`"))?;
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| format!("bad node index `{s}`"))
                };
                Ok(StructureEdge {
                    from: parse(a)?,
                    to: parse(b)?,
                    constraint,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Self::new(label, kinds, edges, 0).map_err(|e| e.to_string())
    }
}

impl fmt::Display for SemanticStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

pub fn matches(g: &QueryGraph, ss: &SemanticStructure) -> bool {
    SemanticStructure::abstract_graph(g).canonical == ss.canonical
}

/// Candidates whose abstraction is isomorphic to `ss`, in input order.
pub fn filter<'a, I>(cands: I, ss: &SemanticStructure) -> Vec<QueryGraph>
where
    I: IntoIterator<Item = &'a QueryGraph>,
{
    cands
        .into_iter()
        .filter(|g| matches(g, ss))
        .cloned()
        .collect()
}

/// An ordered list of structures with unique labels; position is the class
/// index used by the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Taxonomy {
    structures: Vec<SemanticStructure>,
}

const BUILTIN: &str = "\
SS1: E a ; 0-1
SS2: E v a ; 0-1 1-2
SS3: E v v a ; 0-1 1-2 2-3
SS4: E a E ; 0-1 1-2C
SS5: E v a E ; 0-1 1-2 2-3C
SS6: E v a E ; 0-1 1-2 1-3C
";

impl Taxonomy {
    pub fn new(structures: Vec<SemanticStructure>) -> Result<Self, StructureError> {
        for (i, s) in structures.iter().enumerate() {
            if structures[..i].iter().any(|o| o.label == s.label) {
                return Err(StructureError::Invalid(format!(
                    "duplicate label {}",
                    s.label
                )));
            }
        }
        Ok(Self { structures })
    }

    /// The six built-in structures: 1-, 2- and 3-hop chains, then a
    /// constraint on the answer of a 1-hop chain, on the answer of a 2-hop
    /// chain, and on the middle variable of a 2-hop chain.
    pub fn builtin() -> Self {
        BUILTIN.parse().expect("built-in taxonomy is well formed")
    }

    pub fn len(&self) -> usize {
        self.structures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structures.is_empty()
    }

    pub fn structures(&self) -> &[SemanticStructure] {
        &self.structures
    }

    pub fn get(&self, index: usize) -> Option<&SemanticStructure> {
        self.structures.get(index)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.structures.iter().map(|s| s.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.structures.iter().position(|s| s.label == label)
    }

    pub fn by_label(&self, label: &str) -> Option<&SemanticStructure> {
        self.index_of(label).map(|i| &self.structures[i])
    }

    /// Index of the first structure `g` matches.
    pub fn classify_graph(&self, g: &QueryGraph) -> Option<usize> {
        let canon = SemanticStructure::abstract_graph(g).canonical;
        self.structures.iter().position(|s| s.canonical == canon)
    }

    pub fn to_text(&self) -> String {
        self.structures.iter().map(|s| s.to_line() + "\n").collect()
    }
}

impl FromStr for Taxonomy {
    type Err = StructureError;

    /// One structure per line; blank lines and `#` comments are skipped.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut structures = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let s =
                SemanticStructure::parse_line(line).map_err(|message| StructureError::Parse {
                    line: i + 1,
                    message,
                })?;
            structures.push(s);
        }
        Taxonomy::new(structures)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EntityId, RelationId};
    use crate::query_graph::Constraint;

    fn chain(hops: usize, constraint_at: Option<usize>) -> QueryGraph {
        let steps: Vec<_> = (0..hops)
            .map(|i| (RelationId(i as u32), i % 2 == 1))
            .collect();
        let cs: Vec<_> = constraint_at
            .map(|at| Constraint {
                at,
                relation: RelationId(9),
                value: EntityId(99),
            })
            .into_iter()
            .collect();
        QueryGraph::build_chain(EntityId(0), &steps, &cs).unwrap()
    }

    #[test]
    fn builtin_has_six() {
        let t = Taxonomy::builtin();
        assert_eq!(t.len(), 6);
        let hops: Vec<usize> = t.structures().iter().map(|s| s.hops()).collect();
        assert_eq!(hops, [1, 2, 3, 1, 2, 2]);
        assert_eq!(
            t.by_label("SS1").unwrap().kinds(),
            &[NodeKind::E, NodeKind::A]
        );
        let canon: std::collections::BTreeSet<_> =
            t.structures().iter().map(|s| s.canonical()).collect();
        assert_eq!(canon.len(), 6);
    }

    #[test]
    fn chains_land_in_their_class() {
        let t = Taxonomy::builtin();
        let label = |g: &QueryGraph| {
            t.classify_graph(g)
                .map(|i| t.get(i).unwrap().label().to_owned())
        };
        assert_eq!(label(&chain(1, None)).as_deref(), Some("SS1"));
        assert_eq!(label(&chain(2, None)).as_deref(), Some("SS2"));
        assert_eq!(label(&chain(3, None)).as_deref(), Some("SS3"));
        assert_eq!(label(&chain(1, Some(1))).as_deref(), Some("SS4"));
        assert_eq!(label(&chain(2, Some(2))).as_deref(), Some("SS5"));
        assert_eq!(label(&chain(2, Some(1))).as_deref(), Some("SS6"));
        assert_eq!(label(&chain(3, Some(1))), None);
    }

    #[test]
    fn constraint_changes_structure() {
        let ss2 = Taxonomy::builtin().by_label("SS2").unwrap().clone();
        assert!(matches(&chain(2, None), &ss2));
        assert!(!matches(&chain(2, Some(1)), &ss2));
        let g = chain(2, Some(2));
        assert!(matches(&g, &SemanticStructure::abstract_graph(&g)));
    }

    #[test]
    fn filter_keeps_order() {
        let ss2 = Taxonomy::builtin().by_label("SS2").unwrap().clone();
        let cands = [chain(1, None), chain(2, None), chain(2, Some(1))];
        assert_eq!(filter(&cands, &ss2), vec![cands[1].clone()]);
        assert!(filter(&[], &ss2).is_empty());
    }

    #[test]
    fn text_round_trip() {
        let t = Taxonomy::builtin();
        let back: Taxonomy = t.to_text().parse().unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn text_errors() {
        assert!(matches!(
            "SS1: E a ; 0-1\nSSx: E a ; 0-1C\n".parse::<Taxonomy>(),
            Err(StructureError::Parse { line: 2, .. })
        ));
        assert!("A: E a ; 0-1\nA: E v a ; 0-1 1-2\n"
            .parse::<Taxonomy>()
            .is_err());
        assert!("A: a E ; 0-1\n".parse::<Taxonomy>().is_err());
        assert!("A: E a v ; 0-1\n".parse::<Taxonomy>().is_err());
    }
}
