//! Question datasets, structure labeling, query graph extraction from
//! SPARQL, and structure coverage.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::query_graph::{QgEdge, QgError, QgNode, QueryGraph};
use crate::sparql::{parse_sparql, ParseError, SparqlAst, Term};
use crate::structures::Taxonomy;

/// One dataset record. Serialized as a JSON Lines row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuestion {
    pub id: String,
    pub question: String,
    pub topic_entity: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparql: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
    #[serde(default = "default_split")]
    pub split: String,
}

fn default_split() -> String {
    "all".to_owned()
}

impl LabeledQuestion {
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        topic: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            topic_entity: topic.into(),
            answers: Vec::new(),
            hops: None,
            sparql: None,
            structure: None,
            split: default_split(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<LabeledQuestion>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

pub fn write_dataset<W: Write>(
    mut w: W,
    questions: &[LabeledQuestion],
) -> Result<(), DatasetError> {
    for q in questions {
        serde_json::to_writer(&mut w, q)
            .map_err(|source| DatasetError::Json { line: 0, source })?;
        writeln!(w)?;
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ExtractError {
    #[error("query uses unsupported features: {}", .0.join(", "))]
    Unsupported(Vec<String>),
    #[error("no KG symbol for {0}")]
    UnknownSymbol(String),
    #[error("variable predicate ?{0} cannot be mapped to a relation")]
    VariablePredicate(String),
    #[error("no grounded entity reaches the selected variable through variables")]
    NoTopic,
    #[error(transparent)]
    Graph(#[from] QgError),
}

/// Candidate symbol spellings for an IRI: the name itself, then for a full
/// bracketed IRI the part after the last `/` or `#`.
fn iri_spellings(name: &str) -> impl Iterator<Item = &str> {
    let tail = name
        .rsplit(['/', '#'])
        .next()
        .filter(|t| *t != name && !t.is_empty());
    std::iter::once(name).chain(tail)
}

fn resolve_entity(kg: &KnowledgeGraph, term: &Term) -> Result<EntityId, ExtractError> {
    let Term::Iri { name, .. } = term else {
        unreachable!("only IRIs resolve to entities")
    };
    iri_spellings(name)
        .find_map(|s| kg.entity_id(s))
        .ok_or_else(|| ExtractError::UnknownSymbol(term.to_string()))
}

fn resolve_relation(kg: &KnowledgeGraph, term: &Term) -> Result<RelationId, ExtractError> {
    match term {
        Term::Var(v) => Err(ExtractError::VariablePredicate(v.clone())),
        Term::Iri { name, .. } => iri_spellings(name)
            .find_map(|s| kg.relation_id(s))
            .ok_or_else(|| ExtractError::UnknownSymbol(term.to_string())),
    }
}

/// Longest simple path from `start` to `target` whose interior nodes are all
/// variables. `None` when no such path exists.
fn longest_variable_path(
    adj: &[Vec<usize>],
    is_var: &[bool],
    start: usize,
    target: usize,
) -> Option<usize> {
    fn dfs(
        adj: &[Vec<usize>],
        is_var: &[bool],
        u: usize,
        target: usize,
        seen: &mut [bool],
        depth: usize,
    ) -> Option<usize> {
        if u == target {
            return Some(depth);
        }
        let mut best = None;
        for &v in &adj[u] {
            if seen[v] || !is_var[v] {
                continue;
            }
            seen[v] = true;
            best = best.max(dfs(adj, is_var, v, target, seen, depth + 1));
            seen[v] = false;
        }
        best
    }
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    dfs(adj, is_var, start, target, &mut seen, 0)
}

/// Builds the query graph a parsed query denotes.
///
/// The topic is the grounded node with the longest all-variable path to the
/// selected variable; ties go to the node mentioned first. Edges are oriented
/// away from the topic, setting `reversed` where that goes against the
/// pattern's subject-to-object direction.
pub fn extract_query_graph(
    ast: &SparqlAst,
    kg: &KnowledgeGraph,
) -> Result<QueryGraph, ExtractError> {
    if !ast.unsupported_features.is_empty() {
        return Err(ExtractError::Unsupported(ast.unsupported_features.clone()));
    }
    let mut nodes: Vec<QgNode> = Vec::new();
    let mut index: HashMap<QgNode, usize> = HashMap::new();
    let mut node_for = |term: &Term, nodes: &mut Vec<QgNode>| -> Result<usize, ExtractError> {
        let node = match term {
            Term::Var(v) if *v == ast.select_var => QgNode::Lambda,
            Term::Var(v) => QgNode::Existential(v.clone()),
            Term::Iri { .. } => QgNode::Grounded(resolve_entity(kg, term)?),
        };
        Ok(*index.entry(node.clone()).or_insert_with(|| {
            nodes.push(node);
            nodes.len() - 1
        }))
    };
    let mut raw = Vec::new();
    for p in &ast.patterns {
        let s = node_for(&p.subject, &mut nodes)?;
        let r = resolve_relation(kg, &p.predicate)?;
        let o = node_for(&p.object, &mut nodes)?;
        raw.push((s, r, o));
    }
    let Some(lambda) = nodes.iter().position(|n| *n == QgNode::Lambda) else {
        return Err(ExtractError::NoTopic);
    };

    let mut adj = vec![Vec::new(); nodes.len()];
    for &(s, _, o) in &raw {
        adj[s].push(o);
        adj[o].push(s);
    }
    let is_var: Vec<bool> = nodes.iter().map(QgNode::is_variable).collect();
    let mut topic: Option<(usize, usize)> = None;
    for (i, n) in nodes.iter().enumerate() {
        if n.is_variable() {
            continue;
        }
        if let Some(len) = longest_variable_path(&adj, &is_var, i, lambda) {
            if topic.is_none_or(|(_, best)| len > best) {
                topic = Some((i, len));
            }
        }
    }
    let (topic, _) = topic.ok_or(ExtractError::NoTopic)?;

    let mut depth = vec![usize::MAX; nodes.len()];
    depth[topic] = 0;
    let mut queue = VecDeque::from([topic]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let edges = raw
        .into_iter()
        .map(|(s, relation, o)| {
            if depth[s] <= depth[o] {
                QgEdge {
                    from: s,
                    relation,
                    to: o,
                    reversed: false,
                }
            } else {
                QgEdge {
                    from: o,
                    relation,
                    to: s,
                    reversed: true,
                }
            }
        })
        .collect();
    Ok(QueryGraph::new(nodes, edges, topic)?)
}

/// Parses and extracts in one step.
pub fn graph_from_sparql(text: &str, kg: &KnowledgeGraph) -> Result<QueryGraph, AnnotationError> {
    let ast = parse_sparql(text)?;
    Ok(extract_query_graph(&ast, kg)?)
}

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("question {id}: {reason}")]
    Label { id: String, reason: String },
}

/// Outcome of labeling one question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "value", rename_all = "snake_case")]
pub enum Labeling {
    Structure(String),
    Unsupported(String),
}

impl Labeling {
    pub fn structure(&self) -> Option<&str> {
        match self {
            Labeling::Structure(s) => Some(s),
            Labeling::Unsupported(_) => None,
        }
    }
}

/// Hop-count labeling: 1, 2, 3 hops map to `SS1`, `SS2`, `SS3`.
pub fn label_by_hops(q: &LabeledQuestion) -> Result<String, AnnotationError> {
    match q.hops {
        Some(h @ 1..=3) => Ok(format!("SS{h}")),
        Some(h) => Err(AnnotationError::Label {
            id: q.id.clone(),
            reason: format!("hop count {h} outside 1..=3"),
        }),
        None => Err(AnnotationError::Label {
            id: q.id.clone(),
            reason: "no hop count".into(),
        }),
    }
}

/// SPARQL-based labeling: parse, extract, abstract, and look the structure
/// up in `taxonomy`. Any failure along the way is [`Labeling::Unsupported`].
pub fn label_by_sparql(q: &LabeledQuestion, kg: &KnowledgeGraph, taxonomy: &Taxonomy) -> Labeling {
    let Some(text) = &q.sparql else {
        return Labeling::Unsupported("no SPARQL".into());
    };
    match graph_from_sparql(text, kg) {
        Ok(g) => match taxonomy.classify_graph(&g) {
            Some(i) => Labeling::Structure(
                taxonomy
                    .get(i)
                    .expect("index from taxonomy")
                    .label()
                    .to_owned(),
            ),
            None => Labeling::Unsupported("no matching structure".into()),
        },
        Err(e) => Labeling::Unsupported(e.to_string()),
    }
}

/// SPARQL when present, otherwise the hop count.
pub fn label_question(q: &LabeledQuestion, kg: &KnowledgeGraph, taxonomy: &Taxonomy) -> Labeling {
    if q.sparql.is_some() {
        return label_by_sparql(q, kg, taxonomy);
    }
    match label_by_hops(q) {
        Ok(label) if taxonomy.index_of(&label).is_some() => Labeling::Structure(label),
        Ok(label) => Labeling::Unsupported(format!("{label} is not in the taxonomy")),
        Err(e) => Labeling::Unsupported(e.to_string()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub split: String,
    pub total: usize,
    pub labeled: usize,
    /// `None` for an empty split.
    pub percent: Option<f64>,
}

/// Share of questions per split that receive a structure label.
pub fn coverage_report(
    dataset: &[LabeledQuestion],
    kg: &KnowledgeGraph,
    taxonomy: &Taxonomy,
) -> Vec<CoverageRow> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for q in dataset {
        let entry = counts.entry(q.split.as_str()).or_default();
        entry.0 += 1;
        if label_question(q, kg, taxonomy).structure().is_some() {
            entry.1 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(split, (total, labeled))| coverage_row(split, total, labeled))
        .collect()
}

pub fn coverage_row(split: &str, total: usize, labeled: usize) -> CoverageRow {
    CoverageRow {
        split: split.to_owned(),
        total,
        labeled,
        percent: (total > 0).then(|| 100.0 * labeled as f64 / total as f64),
    }
}
