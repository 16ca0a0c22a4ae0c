//! Query graph ranking. One encoder maps the question and every serialized
//! candidate into a common space; candidates are ranked by negative Euclidean
//! distance to the question and trained with a triplet margin loss.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sskgqa_numerics::{
    clip_global_norm, AdamW, AdamWConfig, ParamGrads, ParamStore, Tape, Tensor, Var,
};

use crate::candidates::{enumerate, EnumConfig};
use crate::checkpoint::{expect_end, read_header, CheckpointError};
use crate::encoder::{
    load_payload, positive, write_payload, Encoder, EncoderShape, ModelError, Vocab,
};
use crate::kg::KnowledgeGraph;
use crate::query_graph::QueryGraph;
use crate::structures::{filter, SemanticStructure};
use crate::tokens::tokenize_question;

/// `max(|q - p| - |q - n| + margin, 0)` on `1 x d` rows.
pub fn triplet_on_tape(
    tape: &mut Tape,
    q: Var,
    p: Var,
    n: Var,
    margin: f64,
) -> Result<Var, ModelError> {
    let dp = tape.euclid(q, p)?;
    let dn = tape.euclid(q, n)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    Ok(tape.relu(gap))
}

/// Slice form of [`triplet_on_tape`].
pub fn triplet_loss(q: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64, ModelError> {
    if q.len() != p.len() || q.len() != n.len() {
        return Err(ModelError::Config(format!(
            "triplet widths differ: {}, {}, {}",
            q.len(),
            p.len(),
            n.len()
        )));
    }
    let mut tape = Tape::new();
    let [q, p, n] = [q, p, n].map(|v| tape.constant(Tensor::row_vector(v.to_vec())));
    let loss = triplet_on_tape(&mut tape, q, p, n, margin)?;
    Ok(tape.value(loss).item())
}

/// Scores every candidate for one question; higher is better. Scores must
/// depend only on the question and the candidate itself.
pub trait GraphScorer: Sync {
    fn score_all(
        &self,
        question: &str,
        cands: &[QueryGraph],
        kg: &KnowledgeGraph,
    ) -> Result<Vec<f64>, ModelError>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    /// Position in the candidate slice that was ranked.
    pub index: usize,
    pub score: f64,
    pub canonical: String,
}

/// Orders candidates by descending score, breaking ties by ascending
/// canonical form, so the result does not depend on input order.
pub fn rank_candidates<S: GraphScorer + ?Sized>(
    scorer: &S,
    question: &str,
    cands: &[QueryGraph],
    kg: &KnowledgeGraph,
) -> Result<Vec<Ranked>, ModelError> {
    if cands.is_empty() {
        return Err(ModelError::NoCandidates);
    }
    let scores = scorer.score_all(question, cands, kg)?;
    let mut ranked: Vec<Ranked> = cands
        .iter()
        .zip(scores)
        .enumerate()
        .map(|(index, (g, score))| Ranked {
            index,
            score,
            canonical: g.canonical(),
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.canonical.cmp(&b.canonical))
    });
    Ok(ranked)
}

/// The best candidate under [`rank_candidates`].
pub fn top1<S: GraphScorer + ?Sized>(
    scorer: &S,
    question: &str,
    cands: &[QueryGraph],
    kg: &KnowledgeGraph,
) -> Result<QueryGraph, ModelError> {
    let ranked = rank_candidates(scorer, question, cands, kg)?;
    Ok(cands[ranked[0].index].clone())
}

fn token_set<'a, I: IntoIterator<Item = &'a String>>(tokens: I) -> BTreeSet<String> {
    tokens.into_iter().map(|t| t.to_lowercase()).collect()
}

/// Untrained baseline: Jaccard overlap between the lowercased question
/// tokens and the serialized graph tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct LexicalRanker;

impl GraphScorer for LexicalRanker {
    fn score_all(
        &self,
        question: &str,
        cands: &[QueryGraph],
        kg: &KnowledgeGraph,
    ) -> Result<Vec<f64>, ModelError> {
        let q = token_set(&tokenize_question(question));
        cands
            .iter()
            .map(|g| {
                let toks = g
                    .serialize_tokens(kg)
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                let g = token_set(&toks);
                let inter = q.intersection(&g).count();
                let union = q.union(&g).count();
                Ok(inter as f64 / union.max(1) as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankTrainConfig {
    pub margin: f64,
    pub negatives: usize,
    pub lr: f64,
    pub dropout: f64,
    pub heads: usize,
    pub ff: usize,
    pub d_model: usize,
    pub d_out: usize,
    pub max_positions: usize,
    pub clip: f64,
    pub epochs: usize,
    /// Questions per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RankTrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            negatives: 100,
            lr: 1e-3,
            dropout: 0.5,
            heads: 3,
            ff: 128,
            d_model: 24,
            d_out: 24,
            max_positions: 64,
            clip: 1.0,
            epochs: 20,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl RankTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !positive(self.margin) || self.negatives == 0 {
            return Err(ModelError::Config(
                "margin must be positive and negatives at least 1".into(),
            ));
        }
        if !positive(self.lr)
            || !positive(self.clip)
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.dropout)
        {
            return Err(ModelError::Config(
                "lr, clip and batch_size must be positive and dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            d_model: self.d_model,
            d_out: self.d_out,
            heads: self.heads,
            ff: self.ff,
            max_positions: self.max_positions,
        }
    }
}

/// Trained ranking model. The encoder-call counter lets callers verify that
/// each candidate is encoded once per ranking pass.
#[derive(Debug)]
pub struct RankerModel {
    encoder: Encoder,
    store: ParamStore,
    calls: AtomicUsize,
}

impl Clone for RankerModel {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            store: self.store.clone(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl RankerModel {
    pub fn new(cfg: &RankTrainConfig, vocab: Vocab) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(cfg.shape(), vocab, &mut store, &mut rng)?;
        Ok(Self {
            encoder,
            store,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Number of inference encodings since construction or the last reset.
    pub fn encoder_calls(&self) -> usize {
        self.calls.load(AtomicOrdering::Relaxed)
    }

    pub fn reset_encoder_calls(&self) {
        self.calls.store(0, AtomicOrdering::Relaxed);
    }

    pub fn encode_sequence(&self, tokens: &[String]) -> Result<Vec<f64>, ModelError> {
        self.calls.fetch_add(1, AtomicOrdering::Relaxed);
        self.encoder.encode(&self.store, tokens)
    }

    /// `-|f(q) - f(g)|`; never positive.
    pub fn score_candidate(&self, question: &[String], g: &[String]) -> Result<f64, ModelError> {
        let q = self.encode_sequence(question)?;
        let g = self.encode_sequence(g)?;
        Ok(-distance(&q, &g))
    }

    /// Mean triplet loss for one question with dropout off, and gradients.
    pub fn loss_and_grads(
        &self,
        question: &[String],
        positive: &[String],
        negatives: &[Vec<String>],
        margin: f64,
    ) -> Result<(f64, ParamGrads), ModelError> {
        let mut tape = Tape::new();
        let loss = self.question_loss(&mut tape, question, positive, negatives, margin, None)?;
        let grads = tape.backward(loss)?.params(&tape, &self.store);
        Ok((tape.value(loss).item(), grads))
    }

    fn question_loss(
        &self,
        tape: &mut Tape,
        question: &[String],
        positive: &[String],
        negatives: &[Vec<String>],
        margin: f64,
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var, ModelError> {
        let mut encode = |tape: &mut Tape, toks: &[String]| {
            let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            self.encoder.forward(tape, &self.store, toks, drop)
        };
        let q = encode(tape, question)?;
        let p = encode(tape, positive)?;
        let mut total: Option<Var> = None;
        for neg in negatives {
            let n = encode(tape, neg)?;
            let l = triplet_on_tape(tape, q, p, n, margin)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| ModelError::Config("no negatives".into()))?;
        Ok(tape.scale(total, 1.0 / negatives.len() as f64))
    }

    /// Header `ssk-rank v1`, the encoder header, then the float payload.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        writeln!(w, "ssk-rank v1").map_err(CheckpointError::from)?;
        self.encoder.write_header(&mut w)?;
        write_payload(&mut w, &self.store)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, ModelError> {
        read_header(&mut r, "ssk-rank v1")?;
        let mut store = ParamStore::new();
        let encoder = Encoder::read_header(&mut r, &mut store)?;
        load_payload(&mut r, &mut store)?;
        expect_end(&mut r)?;
        Ok(Self {
            encoder,
            store,
            calls: AtomicUsize::new(0),
        })
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl GraphScorer for RankerModel {
    /// Encodes the question once and each candidate once.
    fn score_all(
        &self,
        question: &str,
        cands: &[QueryGraph],
        kg: &KnowledgeGraph,
    ) -> Result<Vec<f64>, ModelError> {
        let q = self.encode_sequence(&tokenize_question(question))?;
        cands
            .iter()
            .map(|g| {
                let toks = g
                    .serialize_tokens(kg)
                    .map_err(|e| ModelError::Config(e.to_string()))?;
                Ok(-distance(&q, &self.encode_sequence(&toks)?))
            })
            .collect()
    }
}

/// A question paired with its gold query graph.
#[derive(Clone, Debug)]
pub struct RankExample {
    pub question: String,
    pub gold: QueryGraph,
}

/// Token sequences for one question: the question, the gold graph, and every
/// other candidate of the gold structure.
#[derive(Clone, Debug)]
pub struct TripletPool {
    pub question: Vec<String>,
    pub positive: Vec<String>,
    pub negatives: Vec<Vec<String>>,
}

/// Candidates around the gold topic, filtered by the gold graph's own
/// structure, minus the gold graph itself.
pub fn negative_pool(
    ex: &RankExample,
    kg: &KnowledgeGraph,
    enum_cfg: &EnumConfig,
) -> Result<TripletPool, ModelError> {
    let ss = SemanticStructure::abstract_graph(&ex.gold);
    let cfg = EnumConfig {
        max_hops: ss.hops().clamp(1, crate::candidates::MAX_HOPS_CEILING),
        attach_constraints: ss.has_constraint(),
        ..enum_cfg.clone()
    };
    let topic = ex.gold.topic_entity();
    let cands = enumerate(kg, topic, &cfg).map_err(|e| ModelError::Config(e.to_string()))?;
    let gold = ex.gold.canonical();
    let serialize = |g: &QueryGraph| {
        g.serialize_tokens(kg)
            .map_err(|e| ModelError::Config(e.to_string()))
    };
    let negatives = filter(&cands.graphs, &ss)
        .iter()
        .filter(|g| g.canonical() != gold)
        .map(serialize)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TripletPool {
        question: tokenize_question(&ex.question),
        positive: serialize(&ex.gold)?,
        negatives,
    })
}

/// Summary of a training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankTrainReport {
    /// Mean triplet loss per epoch.
    pub losses: Vec<f64>,
    /// Questions whose candidate pool held no negative.
    pub skipped: usize,
}

/// Trains the shared encoder on every question whose gold structure yields
/// at least one negative. Up to `cfg.negatives` are drawn per question per
/// epoch, uniformly without replacement.
pub fn train_ranker(
    examples: &[RankExample],
    kg: &KnowledgeGraph,
    enum_cfg: &EnumConfig,
    cfg: &RankTrainConfig,
) -> Result<(RankerModel, RankTrainReport), ModelError> {
    cfg.validate()?;
    let pools = examples
        .iter()
        .map(|ex| negative_pool(ex, kg, enum_cfg))
        .collect::<Result<Vec<_>, _>>()?;
    train_on_pools(&pools, cfg)
}

/// [`train_ranker`] on prebuilt pools, so callers sweeping configurations can
/// enumerate candidates once.
pub fn train_on_pools(
    pools: &[TripletPool],
    cfg: &RankTrainConfig,
) -> Result<(RankerModel, RankTrainReport), ModelError> {
    cfg.validate()?;
    let usable: Vec<&TripletPool> = pools.iter().filter(|p| !p.negatives.is_empty()).collect();
    let skipped = pools.len() - usable.len();
    let vocab = Vocab::build(pools.iter().flat_map(|p| {
        std::iter::once(&p.question)
            .chain(std::iter::once(&p.positive))
            .chain(&p.negatives)
    }));
    let mut model = RankerModel::new(cfg, vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), &model.store);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        if usable.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let mut sum: Option<Var> = None;
            for &i in chunk {
                let pool = usable[i];
                let take = cfg.negatives.min(pool.negatives.len());
                let picked: Vec<Vec<String>> = index::sample(&mut rng, pool.negatives.len(), take)
                    .into_iter()
                    .map(|j| pool.negatives[j].clone())
                    .collect();
                let l = model.question_loss(
                    &mut tape,
                    &pool.question,
                    &pool.positive,
                    &picked,
                    cfg.margin,
                    Some((cfg.dropout, &mut rng)),
                )?;
                total += tape.value(l).item();
                sum = Some(match sum {
                    Some(s) => tape.add(s, l)?,
                    None => l,
                });
            }
            let loss = tape.scale(sum.expect("chunks are non-empty"), 1.0 / chunk.len() as f64);
            let mut grads = tape.backward(loss)?.params(&tape, &model.store);
            clip_global_norm(&mut grads, cfg.clip);
            opt.step(&mut model.store, &grads)?;
        }
        losses.push(total / usable.len() as f64);
    }
    Ok((model, RankTrainReport { losses, skipped }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_worked_examples() {
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], 1.0).unwrap(),
            0.0
        );
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[0.0, 1.5], &[1.5, 0.0], 1.0).unwrap(),
            1.0
        );
        assert_eq!(
            triplet_loss(&[0.0, 0.0], &[3.0, 0.0], &[0.0, 1.0], 1.0).unwrap(),
            3.0
        );
        assert!(triplet_loss(&[0.0], &[0.0, 1.0], &[0.0], 1.0).is_err());
    }
}
