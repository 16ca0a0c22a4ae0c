//! Token-sequence encoder shared by the structure classifier and the query
//! graph ranker: token embeddings, an optional self-attention block, mean
//! pooling, dropout, and a bias-free projection.
//!
//! Parameters live in a caller-owned [`ParamStore`] so a model can train the
//! encoder together with its own head under one optimizer.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sskgqa_numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

use crate::checkpoint::{
    parse_usize, read_f32s, read_field, read_line, write_f32s, CheckpointError,
};
use crate::embeddings::EmbeddingError;

pub const UNK: &str = "[UNK]";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label `{0}` is not in the taxonomy")]
    UnknownLabel(String),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Lowercased token vocabulary. Index 0 is the out-of-vocabulary bucket.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Collects every distinct token in first-seen order.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut vocab = Self::from_tokens(std::iter::empty::<String>());
        for seq in sequences {
            for tok in seq {
                vocab.insert(tok);
            }
        }
        vocab
    }

    fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut vocab = Self {
            tokens: vec![UNK.to_owned()],
            index: HashMap::from([(UNK.to_owned(), 0)]),
        };
        for t in tokens {
            vocab.insert(&t);
        }
        vocab
    }

    fn insert(&mut self, token: &str) {
        let key = token.to_lowercase();
        if !self.index.contains_key(&key) {
            self.index.insert(key.clone(), self.tokens.len());
            self.tokens.push(key);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&token.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Encoder dimensions. `heads == 0` disables the attention block and with it
/// the positional embeddings, leaving a bag-of-tokens mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub d_model: usize,
    pub d_out: usize,
    pub heads: usize,
    pub ff: usize,
    /// Positions past this share the last positional row.
    pub max_positions: usize,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_out == 0 {
            return Err(ModelError::Config("encoder widths must be positive".into()));
        }
        if self.heads > 0
            && (!self.d_model.is_multiple_of(self.heads) || self.ff == 0 || self.max_positions == 0)
        {
            return Err(ModelError::Config(format!(
                "attention needs heads | d_model ({} / {}), ff > 0 and max_positions > 0",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn attention(&self) -> bool {
        self.heads > 0
    }
}

#[derive(Clone, Debug)]
struct AttentionIds {
    pos: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    shape: EncoderShape,
    vocab: Vocab,
    tok: ParamId,
    attn: Option<AttentionIds>,
    proj: ParamId,
}

fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("length matches shape")
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    uniform(rng, rows, cols, (6.0 / (rows + cols) as f64).sqrt())
}

impl Encoder {
    /// Registers freshly initialized parameters in `store`. Registration order
    /// is fixed, which is what checkpoints rely on.
    pub fn new<R: Rng>(
        shape: EncoderShape,
        vocab: Vocab,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        shape.validate()?;
        let dm = shape.d_model;
        let emb_bound = (3.0 / dm as f64).sqrt();
        let tok = store.add("encoder.tokens", uniform(rng, vocab.len(), dm, emb_bound));
        let attn = if shape.attention() {
            Some(AttentionIds {
                pos: store.add(
                    "encoder.positions",
                    uniform(rng, shape.max_positions, dm, emb_bound),
                ),
                wq: store.add("encoder.wq", xavier(rng, dm, dm)),
                wk: store.add("encoder.wk", xavier(rng, dm, dm)),
                wv: store.add("encoder.wv", xavier(rng, dm, dm)),
                wo: store.add("encoder.wo", xavier(rng, dm, dm)),
                w1: store.add("encoder.ff1", xavier(rng, dm, shape.ff)),
                b1: store.add("encoder.ff1.bias", Tensor::zeros(1, shape.ff)),
                w2: store.add("encoder.ff2", xavier(rng, shape.ff, dm)),
                b2: store.add("encoder.ff2.bias", Tensor::zeros(1, dm)),
            })
        } else {
            None
        };
        let proj = store.add("encoder.projection", xavier(rng, dm, shape.d_out));
        Ok(Self {
            shape,
            vocab,
            tok,
            attn,
            proj,
        })
    }

    pub fn shape(&self) -> EncoderShape {
        self.shape
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// The token embedding matrix id, `V x d_model`.
    pub fn token_embeddings(&self) -> ParamId {
        self.tok
    }

    /// Encodes one sequence to a `1 x d_out` node. `dropout` applies to the
    /// pooled vector and is only passed during training.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tokens: &[String],
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let ids = self.vocab.encode(tokens);
        let tok = tape.param(store, self.tok);
        let mut x = tape.gather_rows(tok, &ids)?;
        if let Some(a) = &self.attn {
            let last = self.shape.max_positions - 1;
            let positions: Vec<usize> = (0..ids.len()).map(|i| i.min(last)).collect();
            let pos = tape.param(store, a.pos);
            let pos = tape.gather_rows(pos, &positions)?;
            x = tape.add(x, pos)?;
            x = self.attention_block(tape, store, a, x)?;
        }
        let mut pooled = tape.mean_rows(x)?;
        if let Some((rate, rng)) = dropout {
            pooled = tape.dropout(pooled, rate, rng);
        }
        let proj = tape.param(store, self.proj);
        Ok(tape.matmul(pooled, proj)?)
    }

    /// Multi-head self-attention and a ReLU feed-forward layer, each with a
    /// residual connection.
    fn attention_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: &AttentionIds,
        x: Var,
    ) -> Result<Var, ModelError> {
        let heads = self.shape.heads;
        let dh = self.shape.d_model / heads;
        let [wq, wk, wv, wo, w1, b1, w2, b2] =
            [a.wq, a.wk, a.wv, a.wo, a.w1, a.b1, a.w2, a.b2].map(|id| tape.param(store, id));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = tape.softmax(scores);
            outs.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        let mixed = tape.matmul(joined, wo)?;
        let x = tape.add(x, mixed)?;
        let hidden = tape.matmul(x, w1)?;
        let hidden = tape.add_row(hidden, b1)?;
        let hidden = tape.relu(hidden);
        let out = tape.matmul(hidden, w2)?;
        let out = tape.add_row(out, b2)?;
        Ok(tape.add(x, out)?)
    }

    /// Inference encoding with dropout off.
    pub fn encode(&self, store: &ParamStore, tokens: &[String]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, tokens, None)?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Header lines: `encoder d_model d_out heads ff max_positions`, then
    /// `vocab N` and one token per line.
    pub fn write_header<W: Write>(&self, w: &mut W) -> Result<(), CheckpointError> {
        let s = self.shape;
        writeln!(
            w,
            "encoder {} {} {} {} {}",
            s.d_model, s.d_out, s.heads, s.ff, s.max_positions
        )?;
        writeln!(w, "vocab {}", self.vocab.len() - 1)?;
        for t in &self.vocab.tokens[1..] {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Reads what [`Encoder::write_header`] wrote and registers zeroed
    /// parameters in `store`, ready for [`load_payload`].
    pub fn read_header<R: Read>(r: &mut R, store: &mut ParamStore) -> Result<Self, ModelError> {
        let dims = read_field(r, "encoder")?;
        let dims = dims
            .split_whitespace()
            .map(parse_usize)
            .collect::<Result<Vec<_>, _>>()?;
        let [d_model, d_out, heads, ff, max_positions] = dims[..] else {
            return Err(CheckpointError::Format("expected five encoder dimensions".into()).into());
        };
        let shape = EncoderShape {
            d_model,
            d_out,
            heads,
            ff,
            max_positions,
        };
        let n = parse_usize(&read_field(r, "vocab")?)?;
        let tokens = (0..n)
            .map(|_| read_line(r))
            .collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocab::from_tokens(tokens);
        if vocab.len() != n + 1 {
            return Err(CheckpointError::Format("vocabulary has duplicate tokens".into()).into());
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        Self::new(shape, vocab, store, &mut rng)
    }
}

/// Writes every tensor in `store`, in registration order.
pub fn write_payload<W: Write>(w: &mut W, store: &ParamStore) -> Result<(), CheckpointError> {
    for t in store.values() {
        write_f32s(w, t.data())?;
    }
    Ok(())
}

/// Overwrites every tensor in `store` from the payload, in registration order.
pub fn load_payload<R: Read>(r: &mut R, store: &mut ParamStore) -> Result<(), CheckpointError> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let t = store.get_mut(id);
        let values = read_f32s(r, t.len())?;
        t.data_mut().copy_from_slice(&values);
    }
    Ok(())
}

/// False for NaN, so config checks reject it.
pub(crate) fn positive(x: f64) -> bool {
    x > 0.0
}
