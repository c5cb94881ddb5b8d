//! Mini pre-norm transformer encoder with an MLM head and a binary
//! classifier head.
//!
//! Parameter names follow a dotted path: `encoder.*` for the shared stack,
//! `mlm.*` for the masked-LM projection and `cls.*` for the classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskedBatch;
use crate::numerics::{sigmoid, AttentionShape, BatchNormState, Graph, Mode, ParamSet, Tensor, Var};
use crate::tokenizer::{encode, Vocabulary};

pub const HEAD_HIDDEN_1: usize = 256;
pub const HEAD_HIDDEN_2: usize = 128;
pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Dropout inside the encoder blocks (train mode only).
    pub dropout_rate: f64,
    /// Dropout before the classifier's output neuron.
    pub head_dropout: f64,
    /// Reuse the token embedding matrix as the MLM output projection.
    pub tie_mlm_head: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 0,
            max_len: 128,
            dropout_rate: 0.1,
            head_dropout: 0.5,
            tie_mlm_head: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        for (name, r) in [("dropout_rate", self.dropout_rate), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("encoder.{name} must lie in [0, 1), got {r}")));
            }
        }
        Ok(())
    }
}

/// Encoder, both heads, and the classifier's batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamSet,
    pub bn1: BatchNormState,
    pub bn2: BatchNormState,
}

/// Token ids of a padded batch plus the key mask derived from PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
    pub key_valid: Vec<bool>,
}

impl TokenBatch {
    /// Right-pads every sequence to the longest one with `pad`.
    pub fn from_sequences(seqs: &[Vec<usize>], pad: usize) -> Result<Self> {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seq == 0 {
            return Err(Error::Data("empty token batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, seq - s.len()));
        }
        let key_valid = ids.iter().map(|&i| i != pad).collect();
        Ok(Self {
            batch: seqs.len(),
            seq,
            ids,
            key_valid,
        })
    }

    pub fn from_masked(batch: &MaskedBatch, pad: usize) -> Self {
        Self {
            batch: batch.batch,
            seq: batch.seq,
            ids: batch.input_ids.clone(),
            key_valid: batch.input_ids.iter().map(|&i| i != pad).collect(),
        }
    }
}

/// `[CLS] pieces… [SEP]`, truncated so the whole sequence fits `max_len`.
pub fn classification_ids(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<usize> {
    let s = vocab.specials();
    let body = encode(vocab, text).ids;
    let keep = body.len().min(max_len.saturating_sub(2));
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(s.cls);
    ids.extend_from_slice(&body[..keep]);
    ids.push(s.sep);
    ids
}

pub struct EncoderOutput {
    /// `[batch·seq × d_model]`
    pub hidden: Var,
    /// One attention node per layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
}

fn layer_name(i: usize, rest: &str) -> String {
    format!("encoder.layer{i}.{rest}")
}

impl Model {
    /// Weights ~ N(0, 0.02²) from a seeded generator; biases zero, norm gains one.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut weight = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
        };
        let (d, v, f) = (config.d_model, config.vocab_size, config.d_ff);
        let mut p = ParamSet::new();
        p.insert("encoder.tok_emb", weight(&[v, d])?)?;
        p.insert("encoder.pos_emb", weight(&[config.max_len, d])?)?;
        for i in 0..config.num_layers {
            p.insert(layer_name(i, "ln1.gamma"), Tensor::ones(&[d]))?;
            p.insert(layer_name(i, "ln1.beta"), Tensor::zeros(&[d]))?;
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(layer_name(i, &format!("attn.{w}")), weight(&[d, d])?)?;
            }
            p.insert(layer_name(i, "ln2.gamma"), Tensor::ones(&[d]))?;
            p.insert(layer_name(i, "ln2.beta"), Tensor::zeros(&[d]))?;
            p.insert(layer_name(i, "ffn.w1"), weight(&[d, f])?)?;
            p.insert(layer_name(i, "ffn.b1"), Tensor::zeros(&[f]))?;
            p.insert(layer_name(i, "ffn.w2"), weight(&[f, d])?)?;
            p.insert(layer_name(i, "ffn.b2"), Tensor::zeros(&[d]))?;
        }
        p.insert("encoder.final_ln.gamma", Tensor::ones(&[d]))?;
        p.insert("encoder.final_ln.beta", Tensor::zeros(&[d]))?;
        if !config.tie_mlm_head {
            p.insert("mlm.w", weight(&[d, v])?)?;
        }
        p.insert("mlm.b", Tensor::zeros(&[v]))?;
        p.insert("cls.dense1.w", weight(&[d, HEAD_HIDDEN_1])?)?;
        p.insert("cls.dense1.b", Tensor::zeros(&[HEAD_HIDDEN_1]))?;
        p.insert("cls.bn1.gamma", Tensor::ones(&[HEAD_HIDDEN_1]))?;
        p.insert("cls.bn1.beta", Tensor::zeros(&[HEAD_HIDDEN_1]))?;
        p.insert("cls.dense2.w", weight(&[HEAD_HIDDEN_1, HEAD_HIDDEN_2])?)?;
        p.insert("cls.dense2.b", Tensor::zeros(&[HEAD_HIDDEN_2]))?;
        p.insert("cls.bn2.gamma", Tensor::ones(&[HEAD_HIDDEN_2]))?;
        p.insert("cls.bn2.beta", Tensor::zeros(&[HEAD_HIDDEN_2]))?;
        p.insert("cls.out.w", weight(&[HEAD_HIDDEN_2, 1])?)?;
        p.insert("cls.out.b", Tensor::zeros(&[1]))?;
        Ok(Self {
            config,
            params: p,
            bn1: BatchNormState::new(HEAD_HIDDEN_1),
            bn2: BatchNormState::new(HEAD_HIDDEN_2),
        })
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder.")
    }

    pub fn is_classifier_param(name: &str) -> bool {
        name.starts_with("cls.")
    }

    /// Records the encoder stack on `g`.
    pub fn encode_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &TokenBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        if batch.seq > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq,
                max_len: cfg.max_len,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                size: cfg.vocab_size,
            });
        }
        let p = &self.params;
        let drop = if mode == Mode::Train { cfg.dropout_rate } else { 0.0 };
        let tok = g.param(p, "encoder.tok_emb")?;
        let pos = g.param(p, "encoder.pos_emb")?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq).collect();
        let te = g.gather(tok, &batch.ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let shape = AttentionShape {
            batch: batch.batch,
            seq: batch.seq,
            heads: cfg.num_heads,
        };
        let mut attention = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let (g1, b1) = (g.param(p, &layer_name(i, "ln1.gamma"))?, g.param(p, &layer_name(i, "ln1.beta"))?);
            let h = g.layer_norm(x, g1, b1, LN_EPS)?;
            let wq = g.param(p, &layer_name(i, "attn.wq"))?;
            let wk = g.param(p, &layer_name(i, "attn.wk"))?;
            let wv = g.param(p, &layer_name(i, "attn.wv"))?;
            let wo = g.param(p, &layer_name(i, "attn.wo"))?;
            let q = g.matmul(h, wq)?;
            let k = g.matmul(h, wk)?;
            let v = g.matmul(h, wv)?;
            let a = g.attention(q, k, v, shape, &batch.key_valid)?;
            attention.push(a);
            let a = g.matmul(a, wo)?;
            let a = g.dropout(a, drop, rng);
            x = g.add(x, a)?;

            let (g2, b2) = (g.param(p, &layer_name(i, "ln2.gamma"))?, g.param(p, &layer_name(i, "ln2.beta"))?);
            let h = g.layer_norm(x, g2, b2, LN_EPS)?;
            let w1 = g.param(p, &layer_name(i, "ffn.w1"))?;
            let bb1 = g.param(p, &layer_name(i, "ffn.b1"))?;
            let w2 = g.param(p, &layer_name(i, "ffn.w2"))?;
            let bb2 = g.param(p, &layer_name(i, "ffn.b2"))?;
            let f = g.matmul(h, w1)?;
            let f = g.add_row(f, bb1)?;
            let f = g.relu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, bb2)?;
            let f = g.dropout(f, drop, rng);
            x = g.add(x, f)?;
        }
        let (gf, bf) = (g.param(p, "encoder.final_ln.gamma")?, g.param(p, "encoder.final_ln.beta")?);
        let hidden = g.layer_norm(x, gf, bf, LN_EPS)?;
        Ok(EncoderOutput { hidden, attention })
    }

    /// MLM logits for selected rows of `hidden` (all rows when `rows` is `None`).
    pub fn mlm_logits_graph(&self, g: &mut Graph, hidden: Var, rows: Option<&[usize]>) -> Result<Var> {
        let h = match rows {
            Some(r) => g.gather(hidden, r)?,
            None => hidden,
        };
        let w = if self.config.tie_mlm_head {
            let e = g.param(&self.params, "encoder.tok_emb")?;
            g.transpose(e)?
        } else {
            g.param(&self.params, "mlm.w")?
        };
        let b = g.param(&self.params, "mlm.b")?;
        let logits = g.matmul(h, w)?;
        g.add_row(logits, b)
    }

    /// Mean cross-entropy (nats) over labeled positions, or `None` when the
    /// batch has no labels.
    pub fn mlm_loss_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &MaskedBatch,
        pad: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Option<Var>> {
        let (rows, targets) = batch.targets();
        if rows.is_empty() {
            return Ok(None);
        }
        let tokens = TokenBatch::from_masked(batch, pad);
        let enc = self.encode_graph(g, &tokens, mode, rng)?;
        let logits = self.mlm_logits_graph(g, enc.hidden, Some(&rows))?;
        g.cross_entropy(logits, &targets).map(Some)
    }

    /// Classifier head on the position-0 rows of `hidden`; returns logits `[batch × 1]`.
    /// Train mode updates the batch-norm running statistics.
    pub fn classifier_logits_graph<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        hidden: Var,
        batch: usize,
        seq: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let pooled = g.gather(hidden, &rows)?;
        self.head_graph(g, pooled, mode, rng)
    }

    /// dense₁ → ReLU → BN₁ → dense₂ → ReLU → BN₂ → dropout → dense(1).
    pub fn head_graph<R: Rng + ?Sized>(&mut self, g: &mut Graph, pooled: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let p = &self.params;
        let w1 = g.param(p, "cls.dense1.w")?;
        let b1 = g.param(p, "cls.dense1.b")?;
        let x = g.matmul(pooled, w1)?;
        let x = g.add_row(x, b1)?;
        let x = g.relu(x);
        let (bg, bb) = (g.param(p, "cls.bn1.gamma")?, g.param(p, "cls.bn1.beta")?);
        let x = g.batch_norm(x, bg, bb, &mut self.bn1, mode)?;
        let w2 = g.param(p, "cls.dense2.w")?;
        let b2 = g.param(p, "cls.dense2.b")?;
        let x = g.matmul(x, w2)?;
        let x = g.add_row(x, b2)?;
        let x = g.relu(x);
        let (bg, bb) = (g.param(p, "cls.bn2.gamma")?, g.param(p, "cls.bn2.beta")?);
        let x = g.batch_norm(x, bg, bb, &mut self.bn2, mode)?;
        let rate = if mode == Mode::Train { self.config.head_dropout } else { 0.0 };
        let x = g.dropout(x, rate, rng);
        let wo = g.param(p, "cls.out.w")?;
        let bo = g.param(p, "cls.out.b")?;
        let z = g.matmul(x, wo)?;
        g.add_row(z, bo)
    }

    /// Encoder hidden states as a `[batch, seq, d_model]` tensor.
    pub fn encode_forward<R: Rng + ?Sized>(&self, batch: &TokenBatch, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.encode_graph(&mut g, batch, mode, rng)?;
        g.value(out.hidden)
            .clone()
            .reshape(vec![batch.batch, batch.seq, self.config.d_model])
    }

    /// MLM logits `[batch, seq, vocab]` for hidden states `[batch, seq, d_model]`.
    pub fn mlm_logits(&self, hidden: &Tensor) -> Result<Tensor> {
        let shape = hidden.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::Shape {
                op: "mlm_logits",
                lhs: shape,
                rhs: vec![self.config.d_model],
            });
        }
        let mut g = Graph::new();
        let h = g.input(hidden.clone().reshape(vec![shape[0] * shape[1], shape[2]])?);
        let logits = self.mlm_logits_graph(&mut g, h, None)?;
        g.value(logits)
            .clone()
            .reshape(vec![shape[0], shape[1], self.config.vocab_size])
    }

    /// Fake-news probabilities `[batch]` from hidden states `[batch, seq, d_model]`,
    /// pooling position 0.
    pub fn classify<R: Rng + ?Sized>(&mut self, hidden: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        let shape = hidden.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.config.d_model {
            return Err(Error::Shape {
                op: "classify",
                lhs: shape,
                rhs: vec![self.config.d_model],
            });
        }
        let mut g = Graph::new();
        let h = g.input(hidden.clone().reshape(vec![shape[0] * shape[1], shape[2]])?);
        let z = self.classifier_logits_graph(&mut g, h, shape[0], shape[1], mode, rng)?;
        Tensor::new(vec![shape[0]], g.value(z).data().iter().map(|&v| sigmoid(v)).collect())
    }

    /// End-to-end eval-mode probabilities for a token batch.
    pub fn predict_proba(&mut self, batch: &TokenBatch) -> Result<Vec<f64>> {
        // eval mode draws nothing
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let enc = self.encode_graph(&mut g, batch, Mode::Eval, &mut rng)?;
        let z = self.classifier_logits_graph(&mut g, enc.hidden, batch.batch, batch.seq, Mode::Eval, &mut rng)?;
        Ok(g.value(z).data().iter().map(|&v| sigmoid(v)).collect())
    }
}
