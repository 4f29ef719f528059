//! Soft-token construction: compress modality features to a fixed length,
//! map them into the embedding width, attend over the embedding matrix, and
//! splice the result in front of the embedded instruction text.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoders::{ModalityFeatures, ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::numerics::{self, ParamId, ParamStore, Tape, Tensor, Var};

/// Scaled dot-product attention: `softmax(Q·Kᵀ / √d_k) · V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_attention_shapes(q, k, v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let scores = numerics::matmul_nt(q, k)?.map(|x| x * scale);
    numerics::matmul(&numerics::softmax_rows(&scores)?, v)
}

fn check_attention_shapes(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if !(q.is_matrix() && k.is_matrix() && v.is_matrix())
        || q.cols() != k.cols()
        || k.rows() != v.rows()
    {
        return Err(Error::shape(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok(())
}

/// Tape version of [`attention`].
pub fn attention_var(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    check_attention_shapes(tape.value(q), tape.value(k), tape.value(v))?;
    let scale = 1.0 / (tape.value(q).cols() as f64).sqrt();
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax_rows(scores)?;
    tape.matmul(weights, v)
}

/// Conv stride and kernel that map `len` rows to exactly `out_len` rows:
/// `s = floor(len / out_len)`, `k = len − (out_len − 1)·s`.
pub fn transform_geometry(len: usize, out_len: usize) -> Result<(usize, usize)> {
    if out_len == 0 || len < out_len {
        return Err(Error::BadLength {
            len,
            target: out_len,
        });
    }
    let stride = len / out_len;
    let kernel = len - (out_len - 1) * stride;
    Ok((stride, kernel))
}

/// Learned query/key/value maps for the optional multi-head alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignProjections {
    pub heads: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Per-modality Conv1D + Linear weights plus the derived conv geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformWeights {
    pub kind: ModalityKind,
    pub in_len: usize,
    pub out_len: usize,
    pub stride: usize,
    pub kernel: usize,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub linear_weight: ParamId,
    pub linear_bias: ParamId,
    pub projections: Option<AlignProjections>,
}

impl TransformWeights {
    /// Registers `{kind}.conv.*`, `{kind}.linear.*` and, for more than one
    /// alignment head, `{kind}.align.*`.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        kind: ModalityKind,
        spec: &ModalitySpec,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (stride, kernel) = transform_geometry(spec.length, spec.out_len)?;
        let d_h = spec.dim;
        let conv_weight = store.insert(
            format!("{kind}.conv.weight"),
            normal(rng, &[kernel, d_h, d_h], (1.0 / (kernel * d_h) as f64).sqrt()),
        );
        let conv_bias = store.insert(format!("{kind}.conv.bias"), Tensor::zeros(&[d_h]));
        let linear_weight = store.insert(
            format!("{kind}.linear.weight"),
            normal(rng, &[d_h, d_model], (1.0 / d_h as f64).sqrt()),
        );
        let linear_bias = store.insert(format!("{kind}.linear.bias"), Tensor::zeros(&[d_model]));
        let projections = if heads > 1 {
            if d_model % heads != 0 {
                return Err(Error::config(
                    "model.alignment_heads",
                    format!("{heads} heads do not divide d_model {d_model}"),
                ));
            }
            let std = (1.0 / d_model as f64).sqrt();
            let mut proj = |name: &str| {
                store.insert(
                    format!("{kind}.align.{name}"),
                    normal(rng, &[d_model, d_model], std),
                )
            };
            Some(AlignProjections {
                heads,
                query: proj("query"),
                key: proj("key"),
                value: proj("value"),
            })
        } else {
            None
        };
        Ok(Self {
            kind,
            in_len: spec.length,
            out_len: spec.out_len,
            stride,
            kernel,
            conv_weight,
            conv_bias,
            linear_weight,
            linear_bias,
            projections,
        })
    }
}

pub(crate) fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `Linear(Conv1D(h))` on the tape; output is `L'×d_e`.
pub fn transform_var(
    tape: &mut Tape,
    store: &ParamStore,
    features: &ModalityFeatures,
    w: &TransformWeights,
) -> Result<Var> {
    if features.kind != w.kind {
        return Err(Error::shape(
            "transform",
            format!("{} features with {} weights", features.kind, w.kind),
        ));
    }
    if features.len() < w.out_len {
        return Err(Error::BadLength {
            len: features.len(),
            target: w.out_len,
        });
    }
    if features.len() != w.in_len {
        return Err(Error::shape(
            "transform",
            format!(
                "{} weights were built for length {}, got {}",
                w.kind,
                w.in_len,
                features.len()
            ),
        ));
    }
    let x = tape.constant(features.matrix.clone());
    let cw = tape.param(store, w.conv_weight);
    let cb = tape.param(store, w.conv_bias);
    let conv = tape.conv1d(x, cw, cb, w.stride)?;
    let lw = tape.param(store, w.linear_weight);
    let lb = tape.param(store, w.linear_bias);
    let lin = tape.matmul(conv, lw)?;
    tape.add_row(lin, lb)
}

/// Pure version of [`transform_var`].
pub fn transform(
    features: &ModalityFeatures,
    w: &TransformWeights,
    store: &ParamStore,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = transform_var(&mut tape, store, features, w)?;
    Ok(tape.value(out).clone())
}

/// Aligns transformed features against the embedding matrix:
/// `Attn(h', E, E)`, or its multi-head projected variant when the weights
/// carry projections.
pub fn align_var(
    tape: &mut Tape,
    store: &ParamStore,
    h_prime: Var,
    embed: Var,
    w: &TransformWeights,
) -> Result<Var> {
    let (hv, ev) = (tape.value(h_prime), tape.value(embed));
    if hv.cols() != ev.cols() {
        return Err(Error::shape(
            "align",
            format!("h' {:?} vs E {:?}", hv.shape(), ev.shape()),
        ));
    }
    let Some(p) = &w.projections else {
        return attention_var(tape, h_prime, embed, embed);
    };
    let d_model = ev.cols();
    let head_dim = d_model / p.heads;
    let wq = tape.param(store, p.query);
    let wk = tape.param(store, p.key);
    let wv = tape.param(store, p.value);
    let q = tape.matmul(h_prime, wq)?;
    let k = tape.matmul(embed, wk)?;
    let v = tape.matmul(embed, wv)?;
    let mut outs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        outs.push(attention_var(tape, qh, kh, vh)?);
    }
    tape.concat_cols(&outs)
}

/// Aligned soft tokens for one modality (`L'×d_e`).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedTokens {
    pub kind: ModalityKind,
    pub matrix: Tensor,
}

/// Single-head alignment `Attn(h', E, E)` with `d_k = d_e`. Every output row
/// is a convex combination of rows of `E`.
pub fn align(kind: ModalityKind, h_prime: &Tensor, embed: &Tensor) -> Result<AlignedTokens> {
    if !h_prime.is_matrix() || !embed.is_matrix() || h_prime.cols() != embed.cols() {
        return Err(Error::shape(
            "align",
            format!("h' {:?} vs E {:?}", h_prime.shape(), embed.shape()),
        ));
    }
    Ok(AlignedTokens {
        kind,
        matrix: attention(h_prime, embed, embed)?,
    })
}

/// Which part of an assembled sequence a span covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Modality(ModalityKind),
    Instruction,
    Response,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Positions of each part of `[image : video : audio : instruction : response]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub spans: Vec<Span>,
    pub instruction_ids: Vec<usize>,
    pub response_ids: Option<Vec<usize>>,
}

impl SequenceLayout {
    /// `soft` lists `(kind, rows)` for each present modality in prefix order.
    pub fn new(
        soft: &[(ModalityKind, usize)],
        instruction_ids: &[usize],
        response_ids: Option<&[usize]>,
    ) -> Result<Self> {
        if instruction_ids.is_empty() {
            return Err(Error::MissingText);
        }
        if soft.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::shape(
                "assemble_prefix",
                "modalities must be distinct and ordered image, video, audio",
            ));
        }
        let mut spans = Vec::with_capacity(soft.len() + 2);
        let mut at = 0;
        for &(kind, rows) in soft {
            spans.push(Span {
                kind: SpanKind::Modality(kind),
                start: at,
                len: rows,
            });
            at += rows;
        }
        spans.push(Span {
            kind: SpanKind::Instruction,
            start: at,
            len: instruction_ids.len(),
        });
        at += instruction_ids.len();
        if let Some(r) = response_ids.filter(|r| !r.is_empty()) {
            spans.push(Span {
                kind: SpanKind::Response,
                start: at,
                len: r.len(),
            });
        }
        Ok(Self {
            spans,
            instruction_ids: instruction_ids.to_vec(),
            response_ids: response_ids.filter(|r| !r.is_empty()).map(<[usize]>::to_vec),
        })
    }

    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, Span::end)
    }

    pub fn span(&self, kind: SpanKind) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.kind == kind)
    }

    pub fn modality_count(&self) -> usize {
        self.spans
            .iter()
            .filter(|s| matches!(s.kind, SpanKind::Modality(_)))
            .count()
    }

    /// Instruction ids followed by response ids.
    pub fn text_ids(&self) -> Vec<usize> {
        let mut ids = self.instruction_ids.clone();
        if let Some(r) = &self.response_ids {
            ids.extend_from_slice(r);
        }
        ids
    }
}

/// The assembled model input: `S×d_e` embeddings plus the span layout.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSequence {
    pub embedded: Tensor,
    pub layout: SequenceLayout,
}

impl InstructionSequence {
    pub fn len(&self) -> usize {
        self.layout.total_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_response(&self) -> bool {
        self.layout.response_ids.is_some()
    }
}

fn ordered_soft<'a>(
    image: Option<&'a AlignedTokens>,
    video: Option<&'a AlignedTokens>,
    audio: Option<&'a AlignedTokens>,
) -> Result<Vec<&'a AlignedTokens>> {
    let mut out = Vec::new();
    for (expected, tokens) in [
        (ModalityKind::Image, image),
        (ModalityKind::Video, video),
        (ModalityKind::Audio, audio),
    ] {
        if let Some(t) = tokens {
            if t.kind != expected {
                return Err(Error::shape(
                    "assemble_prefix",
                    format!("{} tokens passed in the {expected} slot", t.kind),
                ));
            }
            out.push(t);
        }
    }
    Ok(out)
}

/// Concatenates `[image : video : audio : Embed(text)]`. `embed` maps text
/// ids to their `|ids|×d_e` embeddings.
pub fn assemble_prefix<F>(
    image: Option<&AlignedTokens>,
    video: Option<&AlignedTokens>,
    audio: Option<&AlignedTokens>,
    instruction_ids: &[usize],
    response_ids: Option<&[usize]>,
    embed: F,
) -> Result<InstructionSequence>
where
    F: Fn(&[usize]) -> Result<Tensor>,
{
    let soft = ordered_soft(image, video, audio)?;
    let layout = SequenceLayout::new(
        &soft
            .iter()
            .map(|t| (t.kind, t.matrix.rows()))
            .collect::<Vec<_>>(),
        instruction_ids,
        response_ids,
    )?;
    let text = embed(&layout.text_ids())?;
    let mut parts: Vec<&Tensor> = soft.iter().map(|t| &t.matrix).collect();
    parts.push(&text);
    let width = text.cols();
    if let Some(bad) = parts.iter().find(|p| p.cols() != width) {
        return Err(Error::shape(
            "assemble_prefix",
            format!("soft tokens {:?} vs text width {width}", bad.shape()),
        ));
    }
    Ok(InstructionSequence {
        embedded: Tensor::concat_rows(&parts)?,
        layout,
    })
}

/// Tape version of [`assemble_prefix`]: `soft` holds aligned token nodes in
/// prefix order.
pub fn assemble_var(
    tape: &mut Tape,
    soft: &[(ModalityKind, Var)],
    embed: Var,
    instruction_ids: &[usize],
    response_ids: Option<&[usize]>,
) -> Result<(Var, SequenceLayout)> {
    let dims: Vec<(ModalityKind, usize)> = soft
        .iter()
        .map(|&(k, v)| (k, tape.value(v).rows()))
        .collect();
    let layout = SequenceLayout::new(&dims, instruction_ids, response_ids)?;
    let text = tape.gather_rows(embed, &layout.text_ids())?;
    let mut parts: Vec<Var> = soft.iter().map(|&(_, v)| v).collect();
    parts.push(text);
    let x = tape.concat_rows(&parts)?;
    Ok((x, layout))
}
