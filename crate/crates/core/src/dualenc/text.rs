use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Character vocabulary; id 0 is the unknown-character token.
pub const VOCAB: &str = " abcdefghijklmnopqrstuvwxyz0123456789-.";

pub fn vocab_size() -> usize {
    VOCAB.len() + 1
}

/// Lower-cases and maps each character to its vocabulary id.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.chars()
        .flat_map(char::to_lowercase)
        .map(|c| VOCAB.find(c).map_or(0, |i| i + 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub d_word: usize,
    pub d_hidden: usize,
    pub d_embed: usize,
    pub max_len: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            d_word: 64,
            d_hidden: 96,
            d_embed: 64,
            max_len: 64,
        }
    }
}

/// g(·): token vectors plus positional embeddings, a per-token tanh
/// mixing layer, mean pooling, then a two-layer head. Accepts arbitrary
/// continuous token vectors so learned context can be spliced in.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub w_mix: Tensor,
    pub b_mix: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub(crate) fn dense(fan_in: usize, fan_out: usize, rng: &mut crate::rng::Rng) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng)
}

impl TextEncoder {
    pub fn init(config: TextEncoderConfig, rng: &mut crate::rng::Rng) -> Self {
        let TextEncoderConfig {
            d_word,
            d_hidden,
            d_embed,
            max_len,
        } = config;
        Self {
            config,
            token_embed: Tensor::randn(&[vocab_size(), d_word], 0.5, rng),
            pos_embed: Tensor::randn(&[max_len, d_word], 0.1, rng),
            w_mix: dense(d_word, d_hidden, rng),
            b_mix: Tensor::zeros(&[d_hidden]),
            w1: dense(d_hidden, d_hidden, rng),
            b1: Tensor::zeros(&[d_hidden]),
            w2: dense(d_hidden, d_embed, rng),
            b2: Tensor::zeros(&[d_embed]),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("text.token_embed", &self.token_embed),
            ("text.pos_embed", &self.pos_embed),
            ("text.w_mix", &self.w_mix),
            ("text.b_mix", &self.b_mix),
            ("text.w1", &self.w1),
            ("text.b1", &self.b1),
            ("text.w2", &self.w2),
            ("text.b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.token_embed,
            &mut self.pos_embed,
            &mut self.w_mix,
            &mut self.b_mix,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    /// Frozen word vectors for a token id sequence, one row per token.
    pub fn token_vectors(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let d = self.config.d_word;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab_size() {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    len: vocab_size(),
                });
            }
            data.extend_from_slice(self.token_embed.row(id));
        }
        Tensor::matrix(ids.len(), d, data)
    }

    pub fn bind<'a>(&'a self, tape: &'a Tape<'a>) -> BoundText<'a> {
        BoundText {
            config: self.config,
            token_embed: tape.leaf(&self.token_embed),
            pos_embed: tape.leaf(&self.pos_embed),
            w_mix: tape.leaf(&self.w_mix),
            b_mix: tape.leaf(&self.b_mix),
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    /// Unit-norm embedding of one token-vector sequence (L × d_word).
    pub fn encode(&self, tokens: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let seq = tape.leaf(tokens);
        Ok(bound.encode(&[seq])?.to_vec())
    }
}

/// A [`TextEncoder`] whose weights are recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundText<'a> {
    config: TextEncoderConfig,
    pub token_embed: Var<'a>,
    pos_embed: Var<'a>,
    w_mix: Var<'a>,
    b_mix: Var<'a>,
    w1: Var<'a>,
    b1: Var<'a>,
    w2: Var<'a>,
    b2: Var<'a>,
}

impl<'a> BoundText<'a> {
    pub fn vars(&self) -> Vec<Var<'a>> {
        vec![
            self.token_embed,
            self.pos_embed,
            self.w_mix,
            self.b_mix,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }

    /// Word vectors for `ids`, differentiable w.r.t. the embedding table.
    pub fn lookup(&self, ids: &[usize]) -> Result<Var<'a>> {
        if ids.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        self.token_embed.select_rows(ids)
    }

    /// Encodes a batch of token sequences (each L_i × d_word) to a C × d_embed
    /// matrix of unit rows.
    pub fn encode(&self, sequences: &[Var<'a>]) -> Result<Var<'a>> {
        if sequences.is_empty() {
            return Err(Error::Contract("no sequences to encode".into()));
        }
        let mut positioned = Vec::with_capacity(sequences.len());
        let mut lengths = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let shape = seq.shape();
            let (len, width) = match *shape.as_slice() {
                [l, w] => (l, w),
                [w] => (1, w),
                _ => return Err(Error::Shape(format!("token sequence of shape {shape:?}"))),
            };
            if width != self.config.d_word {
                return Err(Error::Dimension {
                    op: "encode_text",
                    lhs: shape,
                    rhs: vec![len, self.config.d_word],
                });
            }
            if len > self.config.max_len {
                return Err(Error::Contract(format!(
                    "sequence of {len} tokens exceeds max length {}",
                    self.config.max_len
                )));
            }
            let seq = seq.reshape(vec![len, width])?;
            let pos = self.pos_embed.select_rows(&(0..len).collect::<Vec<_>>())?;
            positioned.push(seq.add(pos)?);
            lengths.push(len);
        }
        let tape = sequences[0].tape_ref();
        let stacked = tape.concat(&positioned)?;
        let mixed = stacked.matmul(self.w_mix)?.add_row(self.b_mix)?.tanh();
        let pooled = mixed.segment_mean(&lengths)?;
        let hidden = pooled.matmul(self.w1)?.add_row(self.b1)?.tanh();
        hidden.matmul(self.w2)?.add_row(self.b2)?.normalize_rows()
    }
}
