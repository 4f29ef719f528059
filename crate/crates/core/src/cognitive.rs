//! A small pre-norm decoder-only language model.
//!
//! The decoder consumes the assembled sequence as-is: aligned soft tokens and
//! embedded text rows go through exactly the same path, and positions are
//! learned embeddings added to every row.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{normal, InstructionSequence};
use crate::error::{Error, Result};
use crate::numerics::{ops, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{BYTE_VOCAB, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    /// Embedding width `d_e`.
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    /// Size of the positional table; no sequence may be longer.
    pub max_seq_len: usize,
    /// Reuse `E` as the output projection.
    pub tie_output: bool,
    /// Heads in the soft-token alignment. One means plain `Attn(h', E, E)`
    /// with no learned projections.
    pub alignment_heads: usize,
    /// Standard deviation of the normal weight init.
    pub init_std: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ffn_width: 256,
            vocab_size: BYTE_VOCAB,
            max_seq_len: 512,
            tie_output: true,
            alignment_heads: 1,
            init_std: 0.02,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("max_seq_len", self.max_seq_len),
            ("alignment_heads", self.alignment_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide d_model {}", self.heads, self.d_model),
            ));
        }
        if self.d_model % self.alignment_heads != 0 {
            return Err(Error::config(
                "model.alignment_heads",
                format!(
                    "{} heads do not divide d_model {}",
                    self.alignment_heads, self.d_model
                ),
            ));
        }
        if self.vocab_size < BYTE_VOCAB {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be at least {BYTE_VOCAB}"),
            ));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::config("model.init_std", "must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub out: ParamId,
    pub ffn_norm_gain: ParamId,
    pub ffn_norm_bias: ParamId,
    pub ffn_in: ParamId,
    pub ffn_in_bias: ParamId,
    pub ffn_out: ParamId,
    pub ffn_out_bias: ParamId,
}

/// Parameter handles of the decoder. `embed` is the shared matrix `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embed: ParamId,
    pub positions: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_norm_gain: ParamId,
    pub final_norm_bias: ParamId,
    pub lm_head: Option<ParamId>,
}

impl Decoder {
    pub fn register<R: Rng>(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, f, std) = (cfg.d_model, cfg.ffn_width, cfg.init_std);
        // residual projections shrink with depth
        let resid_std = std / (2.0 * cfg.layers as f64).sqrt();
        let embed = store.insert("embed", normal(rng, &[cfg.vocab_size, d], std));
        let positions = store.insert("positions", normal(rng, &[cfg.max_seq_len, d], std));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            layers.push(LayerParams {
                attn_norm_gain: store.insert(name("attn_norm.gain"), Tensor::full(&[d], 1.0)),
                attn_norm_bias: store.insert(name("attn_norm.bias"), Tensor::zeros(&[d])),
                query: store.insert(name("attn.query"), normal(rng, &[d, d], std)),
                key: store.insert(name("attn.key"), normal(rng, &[d, d], std)),
                value: store.insert(name("attn.value"), normal(rng, &[d, d], std)),
                out: store.insert(name("attn.out"), normal(rng, &[d, d], resid_std)),
                ffn_norm_gain: store.insert(name("ffn_norm.gain"), Tensor::full(&[d], 1.0)),
                ffn_norm_bias: store.insert(name("ffn_norm.bias"), Tensor::zeros(&[d])),
                ffn_in: store.insert(name("ffn.in"), normal(rng, &[d, f], std)),
                ffn_in_bias: store.insert(name("ffn.in_bias"), Tensor::zeros(&[f])),
                ffn_out: store.insert(name("ffn.out"), normal(rng, &[f, d], resid_std)),
                ffn_out_bias: store.insert(name("ffn.out_bias"), Tensor::zeros(&[d])),
            });
        }
        let final_norm_gain = store.insert("final_norm.gain", Tensor::full(&[d], 1.0));
        let final_norm_bias = store.insert("final_norm.bias", Tensor::zeros(&[d]));
        let lm_head = (!cfg.tie_output)
            .then(|| store.insert("lm_head", normal(rng, &[cfg.vocab_size, d], std)));
        Ok(Self {
            config: cfg.clone(),
            embed,
            positions,
            layers,
            final_norm_gain,
            final_norm_bias,
            lm_head,
        })
    }

    /// Rows of `E` for `ids` (no positional term).
    pub fn embed_tokens(&self, store: &ParamStore, ids: &[usize]) -> Result<Tensor> {
        let e = store.get(self.embed);
        if let Some(&bad) = ids.iter().find(|&&i| i >= e.rows()) {
            return Err(Error::InvalidId {
                id: bad,
                size: e.rows(),
            });
        }
        if ids.is_empty() {
            return Err(Error::shape("embed_tokens", "no ids"));
        }
        let rows: Vec<&[f64]> = ids.iter().map(|&i| e.row(i)).collect();
        Tensor::from_rows(&rows)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Causal decoder over an `S×d_e` input node; returns `S×V` logits.
    pub fn forward_var(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (len, width) = {
            let xv = tape.value(x);
            (xv.rows(), xv.cols())
        };
        self.check_len(len)?;
        if width != self.config.d_model {
            return Err(Error::shape(
                "decoder",
                format!("input width {width}, d_model {}", self.config.d_model),
            ));
        }
        let pos = tape.param(store, self.positions);
        let pos = tape.slice_rows(pos, 0, len)?;
        let mut h = tape.add(x, pos)?;
        for layer in &self.layers {
            h = self.block(tape, store, layer, h)?;
        }
        let g = tape.param(store, self.final_norm_gain);
        let b = tape.param(store, self.final_norm_bias);
        let h = tape.layer_norm(h, g, b)?;
        let head = tape.param(store, self.lm_head.unwrap_or(self.embed));
        tape.matmul_nt(h, head)
    }

    fn block(&self, tape: &mut Tape, store: &ParamStore, p: &LayerParams, x: Var) -> Result<Var> {
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let g = tape.param(store, p.attn_norm_gain);
        let b = tape.param(store, p.attn_norm_bias);
        let h = tape.layer_norm(x, g, b)?;
        let wq = tape.param(store, p.query);
        let wk = tape.param(store, p.key);
        let wv = tape.param(store, p.value);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = tape.matmul(h, wv)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let qh = tape.slice_cols(q, i * hd, hd)?;
            let kh = tape.slice_cols(k, i * hd, hd)?;
            let vh = tape.slice_cols(v, i * hd, hd)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let w = tape.causal_softmax_rows(scores)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let attn = tape.concat_cols(&heads)?;
        let wo = tape.param(store, p.out);
        let attn = tape.matmul(attn, wo)?;
        let x = tape.add(x, attn)?;

        let g = tape.param(store, p.ffn_norm_gain);
        let b = tape.param(store, p.ffn_norm_bias);
        let h = tape.layer_norm(x, g, b)?;
        let w1 = tape.param(store, p.ffn_in);
        let b1 = tape.param(store, p.ffn_in_bias);
        let h = tape.matmul(h, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h);
        let w2 = tape.param(store, p.ffn_out);
        let b2 = tape.param(store, p.ffn_out_bias);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row(h, b2)?;
        tape.add(x, h)
    }

    /// Logits for an already assembled sequence.
    pub fn forward(&self, store: &ParamStore, seq: &InstructionSequence) -> Result<Tensor> {
        self.forward_embedded(store, &seq.embedded)
    }

    pub fn forward_embedded(&self, store: &ParamStore, embedded: &Tensor) -> Result<Tensor> {
        self.check_len(embedded.rows())?;
        let mut tape = Tape::new();
        let x = tape.constant(embedded.clone());
        let logits = self.forward_var(&mut tape, store, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy decoding: appends the argmax token until EOS or `max_new`
    /// tokens. EOS itself is not returned.
    pub fn generate_greedy(
        &self,
        store: &ParamStore,
        prefix: &InstructionSequence,
        max_new: usize,
    ) -> Result<Vec<usize>> {
        if prefix.has_response() {
            return Err(Error::InvalidData {
                location: "generate".into(),
                message: "prefix already contains a response span".into(),
            });
        }
        self.check_len(prefix.len() + max_new)?;
        let mut embedded = prefix.embedded.clone();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let logits = self.forward_embedded(store, &embedded)?;
            let next = argmax(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            let row = self.embed_tokens(store, &[next])?;
            embedded = Tensor::concat_rows(&[&embedded, &row])?;
        }
        Ok(out)
    }
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of a logits matrix.
pub fn probabilities(logits: &Tensor) -> Result<Tensor> {
    ops::softmax_rows(logits)
}
