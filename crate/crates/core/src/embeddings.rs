//! Entity and relation embeddings trained with TransE, ComplEx, or RotatE
//! scoring, and a filtered-MRR sanity metric.
//!
//! Complex-valued vectors use the half-split layout: the first `d/2`
//! coordinates hold real parts and the last `d/2` imaginary parts. RotatE
//! relation rows keep their `d/2` phases in the first half and zeros in the
//! second.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sskgqa_numerics::{
    clip_global_norm, AdamW, AdamWConfig, NumericsError, ParamStore, Tape, Tensor, Var,
};

use crate::checkpoint::{read_f32s, read_header, write_f32s, CheckpointError};
use crate::kg::{EntityId, KnowledgeGraph, RelationId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    TransE,
    ComplEx,
    RotatE,
}

impl EmbeddingKind {
    pub const ALL: [EmbeddingKind; 3] = [
        EmbeddingKind::TransE,
        EmbeddingKind::ComplEx,
        EmbeddingKind::RotatE,
    ];

    fn needs_even_dim(self) -> bool {
        self != EmbeddingKind::TransE
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::TransE => "transe",
            EmbeddingKind::ComplEx => "complex",
            EmbeddingKind::RotatE => "rotate",
        })
    }
}

impl FromStr for EmbeddingKind {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(EmbeddingKind::TransE),
            "complex" => Ok(EmbeddingKind::ComplEx),
            "rotate" => Ok(EmbeddingKind::RotatE),
            other => Err(EmbeddingError::Config(format!(
                "unknown embedding kind `{other}`"
            ))),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("entity id {0} out of range")]
    Entity(u32),
    #[error("relation id {0} out of range")]
    Relation(u32),
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    kind: EmbeddingKind,
    dim: usize,
    entities: Tensor,
    relations: Tensor,
}

/// Maximum entity row norm enforced after every update.
pub const ENTITY_NORM_CAP: f64 = 10.0;

fn complex_row_product(a: &[f64], b: &[f64], out: &mut [f64]) {
    let h = a.len() / 2;
    for i in 0..h {
        let (ar, ai, br, bi) = (a[i], a[h + i], b[i], b[h + i]);
        out[i] = ar * br - ai * bi;
        out[h + i] = ai * br + ar * bi;
    }
}

impl EmbeddingTable {
    pub fn new(
        kind: EmbeddingKind,
        entities: Tensor,
        relations: Tensor,
    ) -> Result<Self, EmbeddingError> {
        let dim = entities.cols();
        if relations.cols() != dim {
            return Err(EmbeddingError::Config(
                "entity and relation widths differ".into(),
            ));
        }
        if dim == 0 || (kind.needs_even_dim() && !dim.is_multiple_of(2)) {
            return Err(EmbeddingError::Config(format!(
                "{kind} needs a positive even dimension, got {dim}"
            )));
        }
        Ok(Self {
            kind,
            dim,
            entities,
            relations,
        })
    }

    /// Seeded initialization: entities and TransE/ComplEx relations uniform
    /// in `±6/sqrt(d)`, RotatE phases uniform in `[-pi, pi)`.
    pub fn random<R: Rng>(
        kind: EmbeddingKind,
        n: usize,
        r: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, EmbeddingError> {
        // Trilinear scores grow with the cube of the scale, so ComplEx starts small.
        let scale = if kind == EmbeddingKind::ComplEx {
            1.0
        } else {
            6.0
        };
        let bound = scale / (dim as f64).sqrt();
        let mut uniform = |rows: usize| {
            let data = (0..rows * dim)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_vec(rows, dim, data)
        };
        let entities = uniform(n)?;
        let mut relations = uniform(r)?;
        if kind == EmbeddingKind::RotatE {
            for row in 0..r {
                let cells = relations.row_mut(row);
                let half = dim / 2;
                for (c, cell) in cells.iter_mut().enumerate() {
                    *cell = if c < half { (*cell / bound) * PI } else { 0.0 };
                }
            }
        }
        let mut table = Self::new(kind, entities, relations)?;
        table.project();
        Ok(table)
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn entities(&self) -> &Tensor {
        &self.entities
    }

    pub fn relations(&self) -> &Tensor {
        &self.relations
    }

    fn entity_row(&self, e: EntityId) -> Result<&[f64], EmbeddingError> {
        if e.index() < self.num_entities() {
            Ok(self.entities.row(e.index()))
        } else {
            Err(EmbeddingError::Entity(e.0))
        }
    }

    fn relation_row(&self, r: RelationId) -> Result<&[f64], EmbeddingError> {
        if r.index() < self.num_relations() {
            Ok(self.relations.row(r.index()))
        } else {
            Err(EmbeddingError::Relation(r.0))
        }
    }

    /// Copy of the entity vector as a `1 x d` tensor.
    pub fn lookup_entity(&self, e: EntityId) -> Result<Tensor, EmbeddingError> {
        Ok(Tensor::row_vector(self.entity_row(e)?.to_vec()))
    }

    /// Plausibility of `(h, r, t)`; higher is more plausible.
    pub fn score(&self, h: EntityId, r: RelationId, t: EntityId) -> Result<f64, EmbeddingError> {
        let (hv, rv, tv) = (
            self.entity_row(h)?,
            self.relation_row(r)?,
            self.entity_row(t)?,
        );
        Ok(self.score_rows(hv, rv, tv))
    }

    fn score_rows(&self, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
        let d = self.dim;
        match self.kind {
            EmbeddingKind::TransE => -(0..d)
                .map(|i| (h[i] + r[i] - t[i]).powi(2))
                .sum::<f64>()
                .sqrt(),
            EmbeddingKind::ComplEx => {
                let mut hr = vec![0.0; d];
                complex_row_product(h, r, &mut hr);
                (0..d).map(|i| hr[i] * t[i]).sum()
            }
            EmbeddingKind::RotatE => {
                let half = d / 2;
                let mut rot = vec![0.0; d];
                for i in 0..half {
                    rot[i] = r[i].cos();
                    rot[half + i] = r[i].sin();
                }
                let mut hr = vec![0.0; d];
                complex_row_product(h, &rot, &mut hr);
                -(0..d).map(|i| (hr[i] - t[i]).powi(2)).sum::<f64>().sqrt()
            }
        }
    }

    /// Clamps entity rows to [`ENTITY_NORM_CAP`] and wraps RotatE phases
    /// into `[-pi, pi)`.
    fn project(&mut self) {
        for row in 0..self.entities.rows() {
            let cells = self.entities.row_mut(row);
            let norm = cells.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > ENTITY_NORM_CAP {
                let s = ENTITY_NORM_CAP / norm;
                cells.iter_mut().for_each(|x| *x *= s);
            }
        }
        if self.kind == EmbeddingKind::RotatE {
            let half = self.dim / 2;
            for row in 0..self.relations.rows() {
                for cell in &mut self.relations.row_mut(row)[..half] {
                    *cell = (*cell + PI).rem_euclid(2.0 * PI) - PI;
                }
            }
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        writeln!(
            w,
            "ssk-emb v1 {} {} {} {}",
            self.kind,
            self.num_entities(),
            self.num_relations(),
            self.dim
        )
        .map_err(CheckpointError::from)?;
        write_f32s(&mut w, self.entities.data())?;
        write_f32s(&mut w, self.relations.data())?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, EmbeddingError> {
        let header = read_header(&mut r, "ssk-emb v1")?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [kind, n, rels, d] = fields[..] else {
            return Err(
                CheckpointError::Format("expected `kind N R d` after the magic".into()).into(),
            );
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| CheckpointError::Format(format!("bad count `{s}`")))
        };
        let (n, rels, d) = (num(n)?, num(rels)?, num(d)?);
        let entities = Tensor::from_vec(n, d, read_f32s(&mut r, n * d)?)?;
        let relations = Tensor::from_vec(rels, d, read_f32s(&mut r, rels * d)?)?;
        Self::new(kind.parse()?, entities, relations)
    }
}

/// Scores for index triples on a tape, as an `n x 1` column.
pub fn score_on_tape(
    tape: &mut Tape,
    kind: EmbeddingKind,
    entities: Var,
    relations: Var,
    heads: &[usize],
    rels: &[usize],
    tails: &[usize],
) -> Result<Var, NumericsError> {
    let h = tape.gather_rows(entities, heads)?;
    let r = tape.gather_rows(relations, rels)?;
    let t = tape.gather_rows(entities, tails)?;
    Ok(match kind {
        EmbeddingKind::TransE => {
            let sum = tape.add(h, r)?;
            let diff = tape.sub(sum, t)?;
            let dist = tape.row_norm(diff);
            tape.scale(dist, -1.0)
        }
        EmbeddingKind::ComplEx => {
            let hr = tape.complex_mul(h, r)?;
            let prod = tape.mul(hr, t)?;
            tape.row_sum(prod)
        }
        EmbeddingKind::RotatE => {
            let d = tape.value(r).cols();
            let phases = tape.slice_cols(r, 0, d / 2)?;
            let re = tape.cos(phases);
            let im = tape.sin(phases);
            let rot = tape.concat_halves(re, im)?;
            let hr = tape.complex_mul(h, rot)?;
            let diff = tape.sub(hr, t)?;
            let dist = tape.row_norm(diff);
            tape.scale(dist, -1.0)
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedTrainConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negatives: usize,
    /// `None` picks 6 for TransE/RotatE and 0 for ComplEx.
    pub margin: Option<f64>,
    pub seed: u64,
}

impl Default for EmbedTrainConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::ComplEx,
            dim: 64,
            epochs: 100,
            lr: 0.01,
            batch_size: 256,
            negatives: 8,
            margin: None,
            seed: 0,
        }
    }
}

impl EmbedTrainConfig {
    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or(match self.kind {
            EmbeddingKind::ComplEx => 0.0,
            _ => 6.0,
        })
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dim == 0 || self.batch_size == 0 || self.negatives == 0 || self.lr <= 0.0 {
            return Err(EmbeddingError::Config(
                "dim, batch_size, negatives and lr must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Trains a table and returns it with the mean loss of every epoch.
///
/// Per positive triple, `negatives` corruptions replace the head or the tail
/// (fair coin) with a uniform entity. The loss is
/// `-log sigmoid(margin + s_pos) - mean log sigmoid(-margin - s_neg)`,
/// averaged over the batch, minimized with AdamW after clipping the global
/// gradient norm to 1.
pub fn train(
    kg: &KnowledgeGraph,
    cfg: &EmbedTrainConfig,
) -> Result<(EmbeddingTable, Vec<f64>), EmbeddingError> {
    cfg.validate()?;
    if kg.num_triples() == 0 {
        return Err(EmbeddingError::Config(
            "cannot train on an empty graph".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = EmbeddingTable::random(
        cfg.kind,
        kg.num_entities(),
        kg.num_relations(),
        cfg.dim,
        &mut rng,
    )?;
    let mut store = ParamStore::new();
    let ent = store.add("entities", init.entities.clone());
    let rel = store.add("relations", init.relations.clone());
    let mut table = init;
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &store);
    let margin = cfg.margin();
    let n = kg.num_entities();
    let mut order: Vec<usize> = (0..kg.num_triples()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut idx = [Vec::new(), Vec::new(), Vec::new()];
            let mut neg = [Vec::new(), Vec::new(), Vec::new()];
            for &i in batch {
                let t = kg.triples()[i];
                idx[0].push(t.head.index());
                idx[1].push(t.relation.index());
                idx[2].push(t.tail.index());
                for _ in 0..cfg.negatives {
                    let corrupt = rng.random_range(0..n);
                    let (h, tl) = if rng.random_bool(0.5) {
                        (corrupt, t.tail.index())
                    } else {
                        (t.head.index(), corrupt)
                    };
                    neg[0].push(h);
                    neg[1].push(t.relation.index());
                    neg[2].push(tl);
                }
            }
            let mut tape = Tape::new();
            let e = tape.param(&store, ent);
            let r = tape.param(&store, rel);
            let pos = score_on_tape(&mut tape, cfg.kind, e, r, &idx[0], &idx[1], &idx[2])?;
            let negs = score_on_tape(&mut tape, cfg.kind, e, r, &neg[0], &neg[1], &neg[2])?;
            let pos = tape.add_scalar(pos, margin);
            let pos = tape.log_sigmoid(pos);
            let pos = tape.sum(pos);
            let pos = tape.scale(pos, -1.0 / idx[0].len() as f64);
            let negs = tape.scale(negs, -1.0);
            let negs = tape.add_scalar(negs, -margin);
            let negs = tape.log_sigmoid(negs);
            let negs = tape.sum(negs);
            let negs = tape.scale(negs, -1.0 / neg[0].len() as f64);
            let loss = tape.add(pos, negs)?;
            total += tape.value(loss).item() * batch.len() as f64;

            let mut grads = tape.backward(loss)?.params(&tape, &store);
            clip_global_norm(&mut grads, 1.0);
            opt.step(&mut store, &grads)?;
            table.entities = store.get(ent).clone();
            table.relations = store.get(rel).clone();
            table.project();
            *store.get_mut(ent) = table.entities.clone();
            *store.get_mut(rel) = table.relations.clone();
        }
        history.push(total / kg.num_triples() as f64);
    }
    Ok((table, history))
}

/// Tail-prediction MRR over the training triples, filtering other known
/// tails. Ties count as the mean of the optimistic and pessimistic rank.
pub fn filtered_mrr(table: &EmbeddingTable, kg: &KnowledgeGraph) -> Result<f64, EmbeddingError> {
    if kg.num_triples() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for t in kg.triples() {
        let target = table.score(t.head, t.relation, t.tail)?;
        let known: Vec<EntityId> = kg
            .neighbors(t.head, t.relation, false)
            .map_err(|_| EmbeddingError::Entity(t.head.0))?
            .collect();
        let (mut better, mut tied) = (0usize, 0usize);
        for e in 0..table.num_entities() as u32 {
            let e = EntityId(e);
            if e == t.tail || known.contains(&e) {
                continue;
            }
            let s = table.score(t.head, t.relation, e)?;
            if s > target {
                better += 1;
            } else if s == target {
                tied += 1;
            }
        }
        let rank = 1.0 + better as f64 + tied as f64 / 2.0;
        total += 1.0 / rank;
    }
    Ok(total / kg.num_triples() as f64)
}
