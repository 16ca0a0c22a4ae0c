//! Semantic-structure classifier. A question vector and the topic entity's
//! pretrained embedding are fused by a complex product, then a linear layer
//! and softmax score each structure in the taxonomy.
//!
//! The entity table is frozen: it enters the tape as a constant.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sskgqa_numerics::{
    clip_global_norm, AdamW, AdamWConfig, ParamGrads, ParamId, ParamStore, Tape, Tensor, Var,
};

use crate::checkpoint::{
    expect_end, parse_usize, read_field, read_header, read_line, CheckpointError,
};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{
    load_payload, positive, write_payload, Encoder, EncoderShape, ModelError, Vocab,
};
use crate::kg::EntityId;
use crate::structures::Taxonomy;

/// `s = h + q + t` where `t` is the elementwise complex product of `h` and
/// `q` in half-split layout. Inputs are `1 x d` rows with even `d`.
pub fn fuse_on_tape(tape: &mut Tape, head: Var, question: Var) -> Result<Var, ModelError> {
    let t = tape.complex_mul(head, question)?;
    let s = tape.add(head, question)?;
    Ok(tape.add(s, t)?)
}

/// Slice form of [`fuse_on_tape`].
pub fn rotate_fuse(head: &[f64], question: &[f64]) -> Result<Vec<f64>, ModelError> {
    if head.len() != question.len() || !head.len().is_multiple_of(2) {
        return Err(ModelError::Config(format!(
            "fusion needs equal even widths, got {} and {}",
            head.len(),
            question.len()
        )));
    }
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::row_vector(head.to_vec()));
    let q = tape.constant(Tensor::row_vector(question.to_vec()));
    let s = fuse_on_tape(&mut tape, h, q)?;
    Ok(tape.value(s).data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub clip: f64,
    pub seed: u64,
    pub d_model: usize,
    /// Zero disables the attention block.
    pub heads: usize,
    pub ff: usize,
    pub max_positions: usize,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            dropout: 0.1,
            epochs: 50,
            clip: 1.0,
            seed: 0,
            d_model: 24,
            heads: 3,
            ff: 128,
            max_positions: 64,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !positive(self.lr)
            || self.batch_size == 0
            || !positive(self.clip)
            || !(0.0..1.0).contains(&self.dropout)
        {
            return Err(ModelError::Config(
                "lr, batch_size and clip must be positive and dropout in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// One training row: question tokens, topic entity, gold structure label.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierExample {
    pub tokens: Vec<String>,
    pub topic: EntityId,
    pub label: String,
}

#[derive(Clone, Debug)]
pub struct ClassifierModel {
    encoder: Encoder,
    store: ParamStore,
    weight: ParamId,
    bias: ParamId,
    labels: Vec<String>,
    entities: Arc<EmbeddingTable>,
}

impl ClassifierModel {
    /// Encoder output width is the entity table's dimension, so the fusion
    /// is well formed.
    pub fn new(
        cfg: &ClassifierTrainConfig,
        vocab: Vocab,
        taxonomy: &Taxonomy,
        entities: Arc<EmbeddingTable>,
    ) -> Result<Self, ModelError> {
        let d = entities.dim();
        if !d.is_multiple_of(2) || taxonomy.is_empty() {
            return Err(ModelError::Config(
                "entity dimension must be even and the taxonomy non-empty".into(),
            ));
        }
        let shape = EncoderShape {
            d_model: cfg.d_model,
            d_out: d,
            heads: cfg.heads,
            ff: cfg.ff,
            max_positions: cfg.max_positions,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(shape, vocab, &mut store, &mut rng)?;
        let k = taxonomy.len();
        let bound = (6.0 / (d + k) as f64).sqrt();
        let w = (0..d * k)
            .map(|_| rand::Rng::random_range(&mut rng, -bound..=bound))
            .collect();
        let weight = store.add("classifier.weight", Tensor::from_vec(d, k, w)?);
        let bias = store.add("classifier.bias", Tensor::zeros(1, k));
        Ok(Self {
            encoder,
            store,
            weight,
            bias,
            labels: taxonomy.labels().map(str::to_owned).collect(),
            entities,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn entities(&self) -> &EmbeddingTable {
        &self.entities
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Sets the output layer to zero, which makes every prediction uniform.
    pub fn zero_head(&mut self) {
        for id in [self.weight, self.bias] {
            let t = self.store.get_mut(id);
            *t = Tensor::zeros(t.rows(), t.cols());
        }
    }

    /// Question vector `e^q`, width equal to the entity dimension.
    pub fn encode_question(&self, tokens: &[String]) -> Result<Vec<f64>, ModelError> {
        self.encoder.encode(&self.store, tokens)
    }

    /// `1 x K` logits.
    fn logits(
        &self,
        tape: &mut Tape,
        tokens: &[String],
        topic: EntityId,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var, ModelError> {
        let q = self.encoder.forward(tape, &self.store, tokens, dropout)?;
        let h = tape.constant(self.entities.lookup_entity(topic)?);
        let s = fuse_on_tape(tape, h, q)?;
        let w = tape.param(&self.store, self.weight);
        let b = tape.param(&self.store, self.bias);
        let z = tape.matmul(s, w)?;
        Ok(tape.add_row(z, b)?)
    }

    /// Probability of each taxonomy class, in taxonomy order.
    pub fn classify(&self, tokens: &[String], topic: EntityId) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let z = self.logits(&mut tape, tokens, topic, None)?;
        let p = tape.softmax(z);
        Ok(tape.value(p).data().to_vec())
    }

    /// Index of the most probable class. Ties go to the lower index.
    pub fn predict(&self, tokens: &[String], topic: EntityId) -> Result<usize, ModelError> {
        let p = self.classify(tokens, topic)?;
        Ok(argmax(&p))
    }

    /// Mean cross-entropy over `batch` on a fresh tape.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batch: &[&ClassifierExample],
        mut dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var, ModelError> {
        let mut total: Option<Var> = None;
        for ex in batch {
            let k = self
                .labels
                .iter()
                .position(|l| *l == ex.label)
                .ok_or_else(|| ModelError::UnknownLabel(ex.label.clone()))?;
            let drop = dropout.as_mut().map(|(rate, rng)| (*rate, &mut **rng));
            let z = self.logits(tape, &ex.tokens, ex.topic, drop)?;
            let lp = tape.log_softmax(z);
            let pick = tape.pick_cols(lp, &[k])?;
            total = Some(match total {
                Some(t) => tape.add(t, pick)?,
                None => pick,
            });
        }
        let total = total.ok_or_else(|| ModelError::Config("empty batch".into()))?;
        Ok(tape.scale(total, -1.0 / batch.len() as f64))
    }

    /// Loss and parameter gradients with dropout off.
    pub fn loss_and_grads(
        &self,
        batch: &[ClassifierExample],
    ) -> Result<(f64, ParamGrads), ModelError> {
        let refs: Vec<&ClassifierExample> = batch.iter().collect();
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, &refs, None)?;
        let grads = tape.backward(loss)?.params(&tape, &self.store);
        Ok((tape.value(loss).item(), grads))
    }

    /// Header `ssk-clf v1`, the encoder header, `labels K` with one label per
    /// line, then the float payload. The entity table is stored separately.
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        writeln!(w, "ssk-clf v1").map_err(CheckpointError::from)?;
        self.encoder.write_header(&mut w)?;
        writeln!(w, "labels {}", self.labels.len()).map_err(CheckpointError::from)?;
        for l in &self.labels {
            writeln!(w, "{l}").map_err(CheckpointError::from)?;
        }
        write_payload(&mut w, &self.store)?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R, entities: Arc<EmbeddingTable>) -> Result<Self, ModelError> {
        read_header(&mut r, "ssk-clf v1")?;
        let mut store = ParamStore::new();
        let encoder = Encoder::read_header(&mut r, &mut store)?;
        if encoder.shape().d_out != entities.dim() {
            return Err(ModelError::Config(format!(
                "classifier width {} does not match entity dimension {}",
                encoder.shape().d_out,
                entities.dim()
            )));
        }
        let k = parse_usize(&read_field(&mut r, "labels")?)?;
        let labels = (0..k)
            .map(|_| read_line(&mut r))
            .collect::<Result<Vec<_>, _>>()?;
        let weight = store.add("classifier.weight", Tensor::zeros(entities.dim(), k));
        let bias = store.add("classifier.bias", Tensor::zeros(1, k));
        load_payload(&mut r, &mut store)?;
        expect_end(&mut r)?;
        Ok(Self {
            encoder,
            store,
            weight,
            bias,
            labels,
            entities,
        })
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trains encoder and output layer by cross-entropy with AdamW and global
/// norm clipping. Returns the model and the mean loss of each epoch.
pub fn train_classifier(
    examples: &[ClassifierExample],
    taxonomy: &Taxonomy,
    entities: Arc<EmbeddingTable>,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, Vec<f64>), ModelError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ModelError::Config("no training examples".into()));
    }
    for ex in examples {
        if taxonomy.index_of(&ex.label).is_none() {
            return Err(ModelError::UnknownLabel(ex.label.clone()));
        }
        entities.lookup_entity(ex.topic)?;
    }
    let vocab = Vocab::build(examples.iter().map(|e| &e.tokens));
    let mut model = ClassifierModel::new(cfg, vocab, taxonomy, entities)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = AdamW::new(AdamWConfig::with_lr(cfg.lr), &model.store);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&ClassifierExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut tape = Tape::new();
            let loss = model.loss_on_tape(&mut tape, &batch, Some((cfg.dropout, &mut rng)))?;
            total += tape.value(loss).item() * batch.len() as f64;
            let mut grads = tape.backward(loss)?.params(&tape, &model.store);
            clip_global_norm(&mut grads, cfg.clip);
            opt.step(&mut model.store, &grads)?;
        }
        history.push(total / examples.len() as f64);
    }
    Ok((model, history))
}

/// Share of examples whose argmax class is the gold label.
pub fn accuracy(
    model: &ClassifierModel,
    examples: &[ClassifierExample],
) -> Result<f64, ModelError> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for ex in examples {
        if model.labels[model.predict(&ex.tokens, ex.topic)?] == ex.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}
