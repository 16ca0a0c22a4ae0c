//! End-to-end question answering: predict or look up the semantic
//! structure, enumerate candidates, filter, rank, and execute the top graph.
//! Also the hits@1 evaluation loop.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{graph_from_sparql, label_question, LabeledQuestion};
use crate::candidates::{enumerate, CandidateError, EnumConfig, MAX_HOPS_CEILING};
use crate::classifier::{ClassifierExample, ClassifierModel};
use crate::encoder::ModelError;
use crate::kg::{EntityId, KgError, KnowledgeGraph};
use crate::query_graph::QueryGraph;
use crate::ranker::{rank_candidates, GraphScorer, RankExample};
use crate::structures::{filter, SemanticStructure, Taxonomy};
use crate::tokens::tokenize_question;

/// Which structure, if any, filters the candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// The classifier's prediction.
    Predicted,
    /// The question's gold structure.
    Oracle,
    /// No filtering.
    Off,
}

impl FilterMode {
    pub const ALL: [FilterMode; 3] = [FilterMode::Predicted, FilterMode::Oracle, FilterMode::Off];
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterMode::Predicted => "predicted",
            FilterMode::Oracle => "oracle",
            FilterMode::Off => "off",
        })
    }
}

impl FromStr for FilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predicted" => Ok(FilterMode::Predicted),
            "oracle" => Ok(FilterMode::Oracle),
            "off" => Ok(FilterMode::Off),
            _ => Err(format!(
                "unknown filter mode `{s}` (expected predicted, oracle or off)"
            )),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("topic entity `{0}` is not in the knowledge graph")]
    UnknownTopic(String),
    #[error("predicted mode needs a classifier")]
    MissingClassifier,
    #[error("oracle mode needs a gold structure")]
    NoGoldStructure,
    #[error("structure `{0}` is not in the taxonomy")]
    UnknownStructure(String),
    #[error(transparent)]
    Candidates(#[from] CandidateError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kg(#[from] KgError),
}

/// Which candidate set the top graph was chosen from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    /// Candidates matching the structure.
    Filtered,
    /// The structure matched nothing, so the unfiltered set was ranked.
    Fallback,
    /// Filtering was off.
    Unfiltered,
    /// Nothing to rank.
    Empty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Answer {
    pub graph: Option<QueryGraph>,
    pub entities: BTreeSet<EntityId>,
    pub structure: Option<String>,
    pub source: CandidateSource,
    /// Size of the set that was ranked.
    pub ranked: usize,
}

pub struct Pipeline<'a> {
    pub kg: &'a KnowledgeGraph,
    pub taxonomy: &'a Taxonomy,
    pub classifier: Option<&'a ClassifierModel>,
    pub ranker: &'a dyn GraphScorer,
    /// Used verbatim when filtering is off and for the fallback set.
    pub enum_cfg: EnumConfig,
    pub mode: FilterMode,
    pub fallback: bool,
}

/// Enumeration settings implied by a structure: its hop count, and
/// constraint edges only when it has any.
pub fn config_for(ss: &SemanticStructure, base: &EnumConfig) -> EnumConfig {
    EnumConfig {
        max_hops: ss.hops().clamp(1, MAX_HOPS_CEILING),
        attach_constraints: ss.has_constraint(),
        ..base.clone()
    }
}

impl Pipeline<'_> {
    /// Answers one question. `gold` is the gold structure label, needed only
    /// in oracle mode.
    pub fn answer(
        &self,
        question: &str,
        topic: EntityId,
        gold: Option<&str>,
    ) -> Result<Answer, PipelineError> {
        self.kg.check_entity(topic)?;
        let structure = match self.mode {
            FilterMode::Off => None,
            FilterMode::Oracle => Some(gold.ok_or(PipelineError::NoGoldStructure)?.to_owned()),
            FilterMode::Predicted => {
                let clf = self.classifier.ok_or(PipelineError::MissingClassifier)?;
                let k = clf.predict(&tokenize_question(question), topic)?;
                Some(clf.labels()[k].clone())
            }
        };
        let (cands, source) = match &structure {
            None => (
                enumerate(self.kg, topic, &self.enum_cfg)?.graphs,
                CandidateSource::Unfiltered,
            ),
            Some(label) => {
                let ss = self
                    .taxonomy
                    .by_label(label)
                    .ok_or_else(|| PipelineError::UnknownStructure(label.clone()))?;
                let all = enumerate(self.kg, topic, &config_for(ss, &self.enum_cfg))?.graphs;
                let kept = filter(&all, ss);
                if kept.is_empty() && self.fallback {
                    (
                        enumerate(self.kg, topic, &self.enum_cfg)?.graphs,
                        CandidateSource::Fallback,
                    )
                } else {
                    (kept, CandidateSource::Filtered)
                }
            }
        };
        if cands.is_empty() {
            return Ok(Answer {
                graph: None,
                entities: BTreeSet::new(),
                structure,
                source: CandidateSource::Empty,
                ranked: 0,
            });
        }
        let ranked = rank_candidates(self.ranker, question, &cands, self.kg)?;
        let graph = cands[ranked[0].index].clone();
        Ok(Answer {
            entities: graph.execute(self.kg)?,
            graph: Some(graph),
            structure,
            source,
            ranked: cands.len(),
        })
    }

    /// Evaluates every question in parallel. Records keep dataset order.
    pub fn evaluate(&self, dataset: &[LabeledQuestion]) -> EvalReport {
        let records: Vec<QuestionRecord> = dataset.par_iter().map(|q| self.record(q)).collect();
        EvalReport::from_records(self.mode, records)
    }

    fn record(&self, q: &LabeledQuestion) -> QuestionRecord {
        let mut rec = QuestionRecord {
            id: q.id.clone(),
            gold_structure: None,
            predicted_structure: None,
            structure_correct: None,
            source: CandidateSource::Empty,
            candidates: 0,
            top1: None,
            top1_sparql: None,
            gold_graph_hit: None,
            answers: Vec::new(),
            correct: false,
            unsupported: false,
            error: None,
        };
        match gold_structure(q, self.kg, self.taxonomy) {
            Some(label) => rec.gold_structure = Some(label),
            None => {
                rec.unsupported = true;
                return rec;
            }
        }
        let Some(topic) = self.kg.entity_id(&q.topic_entity) else {
            rec.error = Some(PipelineError::UnknownTopic(q.topic_entity.clone()).to_string());
            return rec;
        };
        let answer = match self.answer(&q.question, topic, rec.gold_structure.as_deref()) {
            Ok(a) => a,
            Err(e) => {
                rec.error = Some(e.to_string());
                return rec;
            }
        };
        if self.mode != FilterMode::Off {
            rec.predicted_structure = answer.structure.clone();
            rec.structure_correct = Some(answer.structure == rec.gold_structure);
        }
        rec.source = answer.source;
        rec.candidates = answer.ranked;
        if let Some(g) = &answer.graph {
            rec.top1 = Some(g.canonical());
            rec.top1_sparql = g.to_sparql(self.kg).ok();
            if let Some(Ok(gold)) = q.sparql.as_deref().map(|s| graph_from_sparql(s, self.kg)) {
                rec.gold_graph_hit = Some(gold.canonical() == g.canonical());
            }
        }
        rec.answers = answer
            .entities
            .iter()
            .filter_map(|&e| self.kg.entity_symbol(e).ok().map(str::to_owned))
            .collect();
        rec.correct = rec.answers.iter().any(|a| q.answers.contains(a));
        rec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub gold_structure: Option<String>,
    /// The structure used for filtering; `None` when filtering is off.
    pub predicted_structure: Option<String>,
    pub structure_correct: Option<bool>,
    pub source: CandidateSource,
    pub candidates: usize,
    /// Canonical form of the top-1 graph.
    pub top1: Option<String>,
    pub top1_sparql: Option<String>,
    /// Whether the top-1 graph is the gold graph, when gold SPARQL is given.
    pub gold_graph_hit: Option<bool>,
    pub answers: Vec<String>,
    /// The executed answers intersect the gold answers.
    pub correct: bool,
    pub unsupported: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: FilterMode,
    pub total: usize,
    pub correct: usize,
    /// `100 * correct / total`.
    pub hits_at_1: f64,
    /// Share of questions with a gold graph whose top-1 is that graph.
    pub graph_hits_at_1: Option<f64>,
    pub unsupported: usize,
    pub no_candidates: usize,
    pub records: Vec<QuestionRecord>,
}

impl EvalReport {
    pub fn from_records(mode: FilterMode, records: Vec<QuestionRecord>) -> Self {
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let graded: Vec<bool> = records.iter().filter_map(|r| r.gold_graph_hit).collect();
        let percent = |n: usize, d: usize| {
            if d == 0 {
                0.0
            } else {
                100.0 * n as f64 / d as f64
            }
        };
        Self {
            mode,
            total,
            correct,
            hits_at_1: percent(correct, total),
            graph_hits_at_1: (!graded.is_empty())
                .then(|| percent(graded.iter().filter(|&&h| h).count(), graded.len())),
            unsupported: records.iter().filter(|r| r.unsupported).count(),
            no_candidates: records
                .iter()
                .filter(|r| {
                    !r.unsupported && r.error.is_none() && r.source == CandidateSource::Empty
                })
                .count(),
            records,
        }
    }
}

/// The gold structure label of a question: its `structure` field when that
/// names a taxonomy entry, otherwise whatever labeling finds.
pub fn gold_structure(
    q: &LabeledQuestion,
    kg: &KnowledgeGraph,
    taxonomy: &Taxonomy,
) -> Option<String> {
    match &q.structure {
        Some(label) => taxonomy.index_of(label).map(|_| label.clone()),
        None => label_question(q, kg, taxonomy)
            .structure()
            .map(str::to_owned),
    }
}

/// Classifier rows for every question with a resolvable topic and a gold
/// structure. Also returns how many questions were skipped.
pub fn classifier_examples(
    dataset: &[LabeledQuestion],
    kg: &KnowledgeGraph,
    taxonomy: &Taxonomy,
) -> (Vec<ClassifierExample>, usize) {
    let out: Vec<ClassifierExample> = dataset
        .iter()
        .filter_map(|q| {
            Some(ClassifierExample {
                tokens: tokenize_question(&q.question),
                topic: kg.entity_id(&q.topic_entity)?,
                label: gold_structure(q, kg, taxonomy)?,
            })
        })
        .collect();
    let skipped = dataset.len() - out.len();
    (out, skipped)
}

/// Ranker rows for every question whose gold SPARQL extracts to a graph.
/// Also returns how many questions were skipped.
pub fn rank_examples(
    dataset: &[LabeledQuestion],
    kg: &KnowledgeGraph,
) -> (Vec<RankExample>, usize) {
    let out: Vec<RankExample> = dataset
        .iter()
        .filter_map(|q| {
            Some(RankExample {
                question: q.question.clone(),
                gold: graph_from_sparql(q.sparql.as_deref()?, kg).ok()?,
            })
        })
        .collect();
    let skipped = dataset.len() - out.len();
    (out, skipped)
}
