//! Candidate query graph enumeration around a topic entity.
//!
//! Chains are grown one `(relation, direction)` step at a time while tracking
//! the set of entities reachable at the chain's end, so only satisfiable
//! chains are ever produced. Constraint variants attach one outgoing edge from
//! a chain variable to a grounded value drawn from the KG.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KgError, KnowledgeGraph, RelationId};
use crate::query_graph::{QgError, QueryGraph};

pub const MAX_HOPS_CEILING: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnumConfig {
    pub max_hops: usize,
    pub attach_constraints: bool,
    /// When set, only these relations may form constraint edges.
    pub constraint_relations: Option<Vec<RelationId>>,
    pub max_candidates: usize,
}

impl Default for EnumConfig {
    fn default() -> Self {
        Self {
            max_hops: 3,
            attach_constraints: false,
            constraint_relations: None,
            max_candidates: 10_000,
        }
    }
}

impl EnumConfig {
    pub fn validate(&self) -> Result<(), CandidateError> {
        if !(1..=MAX_HOPS_CEILING).contains(&self.max_hops) {
            return Err(CandidateError::Config(format!(
                "max_hops must be in 1..={MAX_HOPS_CEILING}, got {}",
                self.max_hops
            )));
        }
        if self.max_candidates == 0 {
            return Err(CandidateError::Config(
                "max_candidates must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CandidateError {
    #[error("invalid enumeration config: {0}")]
    Config(String),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Graph(#[from] QgError),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Candidates {
    pub graphs: Vec<QueryGraph>,
    /// Set when `max_candidates` cut the enumeration short.
    pub truncated: bool,
}

type Step = (RelationId, bool);

struct Chain {
    steps: Vec<Step>,
    /// `frontiers[i]` holds every entity reachable at chain position `i`.
    frontiers: Vec<BTreeSet<EntityId>>,
}

fn available_steps(
    kg: &KnowledgeGraph,
    frontier: &BTreeSet<EntityId>,
) -> Result<BTreeSet<Step>, KgError> {
    let mut steps = BTreeSet::new();
    for &e in frontier {
        steps.extend(kg.out_edges(e)?.iter().map(|&(r, _)| (r, false)));
        steps.extend(kg.in_edges(e)?.iter().map(|&(r, _)| (r, true)));
    }
    Ok(steps)
}

fn advance(
    kg: &KnowledgeGraph,
    frontier: &BTreeSet<EntityId>,
    (r, rev): Step,
) -> Result<BTreeSet<EntityId>, KgError> {
    let mut next = BTreeSet::new();
    for &e in frontier {
        next.extend(kg.neighbors(e, r, rev)?);
    }
    Ok(next)
}

/// Entities at each position that lie on at least one complete walk.
fn feasible(kg: &KnowledgeGraph, chain: &Chain) -> Result<Vec<BTreeSet<EntityId>>, KgError> {
    let k = chain.steps.len();
    let mut back = vec![BTreeSet::new(); k + 1];
    back[k] = chain.frontiers[k].clone();
    for i in (0..k).rev() {
        let (r, rev) = chain.steps[i];
        for &x in &chain.frontiers[i] {
            let mut next = kg.neighbors(x, r, rev)?;
            if next.any(|y| back[i + 1].contains(&y)) {
                back[i].insert(x);
            }
        }
    }
    Ok(back)
}

struct Sink<'a> {
    cfg: &'a EnumConfig,
    seen: HashSet<String>,
    out: Candidates,
}

impl Sink<'_> {
    /// Returns false once the cap is hit.
    fn push(&mut self, g: QueryGraph) -> bool {
        if self.out.graphs.len() >= self.cfg.max_candidates {
            self.out.truncated = true;
            return false;
        }
        if self.seen.insert(g.canonical()) {
            self.out.graphs.push(g);
        }
        true
    }
}

/// Every satisfiable chain of `1..=max_hops` steps from `topic`, shortest
/// first and in `(relation id, direction)` order within a length; each chain
/// is followed by its constraint variants when those are enabled.
pub fn enumerate(
    kg: &KnowledgeGraph,
    topic: EntityId,
    cfg: &EnumConfig,
) -> Result<Candidates, CandidateError> {
    cfg.validate()?;
    kg.check_entity(topic)?;
    let mut sink = Sink {
        cfg,
        seen: HashSet::new(),
        out: Candidates::default(),
    };
    let mut level = vec![Chain {
        steps: Vec::new(),
        frontiers: vec![BTreeSet::from([topic])],
    }];
    for _ in 0..cfg.max_hops {
        let mut next_level = Vec::new();
        for chain in &level {
            let last = chain.frontiers.last().expect("non-empty");
            for step in available_steps(kg, last)? {
                let frontier = advance(kg, last, step)?;
                debug_assert!(!frontier.is_empty());
                let mut steps = chain.steps.clone();
                steps.push(step);
                let mut frontiers = chain.frontiers.clone();
                frontiers.push(frontier);
                let grown = Chain { steps, frontiers };
                if !emit(kg, topic, &grown, &mut sink)? {
                    return Ok(sink.out);
                }
                next_level.push(grown);
            }
        }
        level = next_level;
    }
    Ok(sink.out)
}

fn emit(
    kg: &KnowledgeGraph,
    topic: EntityId,
    chain: &Chain,
    sink: &mut Sink<'_>,
) -> Result<bool, CandidateError> {
    let base = QueryGraph::build_chain(topic, &chain.steps, &[])?;
    if !sink.push(base.clone()) {
        return Ok(false);
    }
    if !sink.cfg.attach_constraints {
        return Ok(true);
    }
    let back = feasible(kg, chain)?;
    for (at, nodes) in back.iter().enumerate().skip(1) {
        let mut options = BTreeSet::new();
        for &x in nodes {
            for &(r, t) in kg.out_edges(x)? {
                let allowed = sink
                    .cfg
                    .constraint_relations
                    .as_ref()
                    .is_none_or(|list| list.contains(&r));
                if allowed && t != topic {
                    options.insert((r, t));
                }
            }
        }
        for (r, t) in options {
            if !sink.push(base.with_constraint(at, r, t, false)?) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
