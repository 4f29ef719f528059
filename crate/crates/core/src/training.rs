//! Single-stage instruction fine-tuning of every parameter: masked response
//! NLL, AdamW, warmup + cosine schedule, and gradient accumulation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{SequenceLayout, SpanKind};
use crate::error::{Error, Result};
use crate::model::{EncodedExample, ModelParams};
use crate::numerics::{ops, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    /// Token mean over the response.
    Mean,
    /// Token sum over the response.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub loss_reduction: LossReduction,
    /// Clip the accumulated gradient to this global L2 norm.
    pub max_grad_norm: Option<f64>,
    /// Keep the embedding matrix fixed.
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            warmup_ratio: 0.03,
            epochs: 5,
            micro_batch: 4,
            grad_accum: 3,
            max_seq_len: 512,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            loss_reduction: LossReduction::Mean,
            max_grad_norm: None,
            freeze_embeddings: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate", "must be positive");
        }
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return fail("warmup_ratio", "must be in (0, 1)");
        }
        if self.micro_batch == 0 {
            return fail("micro_batch", "must be positive");
        }
        if self.grad_accum == 0 {
            return fail("grad_accum", "must be positive");
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return fail("beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return fail("beta2", "must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight_decay", "must be non-negative");
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return fail("max_grad_norm", "must be positive");
            }
        }
        Ok(())
    }

    /// Examples consumed by one optimizer update.
    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size())
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * self.steps_per_epoch(examples)
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).round() as usize
    }
}

/// Linear warmup from 0 to the peak, then cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let peak = cfg.learning_rate;
    let warmup = cfg.warmup_steps(total_steps);
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total_steps <= warmup {
        return peak;
    }
    let progress = (step.min(total_steps) - warmup) as f64 / (total_steps - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// `(logit row, target id)` pairs: the token at response position `p` is
/// predicted from row `p − 1`.
pub fn response_targets(layout: &SequenceLayout) -> Result<Vec<(usize, usize)>> {
    let span = layout.span(SpanKind::Response).ok_or(Error::NoResponseSpan)?;
    let ids = layout.response_ids.as_ref().ok_or(Error::NoResponseSpan)?;
    Ok(span.range().zip(ids).map(|(p, &id)| (p - 1, id)).collect())
}

fn reduction_scale(reduction: LossReduction, tokens: usize) -> f64 {
    match reduction {
        LossReduction::Mean => 1.0 / tokens as f64,
        LossReduction::Sum => 1.0,
    }
}

/// Negative log-likelihood of the response tokens only; every other
/// position contributes nothing.
pub fn response_nll(logits: &Tensor, layout: &SequenceLayout, reduction: LossReduction) -> Result<f64> {
    let targets = response_targets(layout)?;
    if logits.rows() != layout.total_len() {
        return Err(Error::shape(
            "response_nll",
            format!("{} logit rows for a sequence of {}", logits.rows(), layout.total_len()),
        ));
    }
    let mut total = 0.0;
    for &(row, target) in &targets {
        total -= ops::log_softmax(logits.row(row))[target];
    }
    Ok(total * reduction_scale(reduction, targets.len()))
}

/// Per-example loss recorded on the tape.
pub fn example_loss_var(
    tape: &mut Tape,
    params: &ModelParams,
    ex: &EncodedExample,
    reduction: LossReduction,
) -> Result<Var> {
    let (logits, layout) = params.logits_var(tape, ex)?;
    let targets = response_targets(&layout)?;
    tape.masked_nll(logits, &targets, reduction_scale(reduction, targets.len()))
}

/// Loss and gradient for one example.
pub fn example_gradient(
    params: &ModelParams,
    ex: &EncodedExample,
    reduction: LossReduction,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let loss = example_loss_var(&mut tape, params, ex, reduction)?;
    let grads = tape.backward(loss, &params.store)?;
    Ok((tape.value(loss).item()?, grads))
}

/// Mean loss and mean gradient over a set of examples. Per-example passes
/// run in parallel; the sum is taken in input order.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[EncodedExample],
    reduction: LossReduction,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|ex| example_gradient(params, ex, reduction))
        .collect::<Result<_>>()?;
    let mut loss = 0.0;
    let mut grads = params.store.zeros_like();
    for (l, g) in &per_example {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            acc.add_assign(gi);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    grads.iter_mut().for_each(|g| g.scale_assign(inv));
    Ok((loss * inv, grads))
}

/// Decoupled-weight-decay Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            t: 0,
            m: params.store.zeros_like(),
            v: params.store.zeros_like(),
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &[Tensor],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let frozen = cfg.freeze_embeddings.then_some(params.decoder.embed);
        for id in params.store.ids() {
            if Some(id) == frozen {
                continue;
            }
            let (m, v, g) = (&mut self.m[id.0], &mut self.v[id.0], &grads[id.0]);
            let p = params.store.get_mut(id);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                *p -= lr * (update + cfg.weight_decay * *p);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model parameters, optimizer state, step counter, and the shuffling RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    /// Completed optimizer updates.
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: ModelParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.max_seq_len > params.config().max_seq_len {
            return Err(Error::config(
                "train.max_seq_len",
                format!(
                    "{} exceeds the positional table of {}",
                    config.max_seq_len,
                    params.config().max_seq_len
                ),
            ));
        }
        Ok(Self {
            optimizer: AdamState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            step: 0,
        })
    }

    fn check_lengths(&self, batch: &[EncodedExample]) -> Result<()> {
        let cfg = &self.params.modality;
        for ex in batch {
            let soft: usize = ex.features.iter().map(|f| cfg.spec(f.kind).out_len).sum();
            let len = soft
                + ex.instruction_ids.len()
                + ex.response_ids.as_ref().map_or(0, Vec::len);
            if len > self.config.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: self.config.max_seq_len,
                });
            }
        }
        Ok(())
    }

    /// Accumulated mean gradient over `batch`, split into micro-batches of
    /// `micro_batch` examples and weighted by micro-batch size.
    pub fn accumulated_gradient(&self, batch: &[EncodedExample]) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_lengths(batch)?;
        let mut loss = 0.0;
        let mut grads = self.params.store.zeros_like();
        let total = batch.len() as f64;
        for micro in batch.chunks(self.config.micro_batch) {
            let (l, g) = batch_gradient(&self.params, micro, self.config.loss_reduction)?;
            let w = micro.len() as f64 / total;
            loss += l * w;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                for (a, x) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += w * x;
                }
            }
        }
        Ok((loss, grads))
    }

    /// One optimizer update on `batch` with the learning rate scheduled for
    /// the current step out of `total_steps`.
    pub fn train_step(&mut self, batch: &[EncodedExample], total_steps: usize) -> Result<StepMetrics> {
        let (loss, mut grads) = self.accumulated_gradient(batch)?;
        if self.config.freeze_embeddings {
            let e = self.params.decoder.embed.0;
            grads[e] = Tensor::zeros(grads[e].shape());
        }
        let grad_norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        if let Some(max) = self.config.max_grad_norm {
            if grad_norm > max {
                let s = max / grad_norm;
                grads.iter_mut().for_each(|g| g.scale_assign(s));
            }
        }
        let lr = lr_at(self.step as usize, total_steps, &self.config);
        self.optimizer.apply(&mut self.params, &grads, lr, &self.config);
        self.step += 1;
        Ok(StepMetrics {
            step: self.step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Trains for the configured epochs, resuming from the current step
    /// (which must sit on an epoch boundary). The example order is
    /// reshuffled at the start of each epoch. `on_step` sees every update;
    /// `on_epoch` runs after each completed epoch.
    pub fn fit<S, E>(&mut self, dataset: &[EncodedExample], mut on_step: S, mut on_epoch: E) -> Result<()>
    where
        S: FnMut(&StepMetrics) -> Result<()>,
        E: FnMut(usize, &Trainer) -> Result<()>,
    {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.check_lengths(dataset)?;
        let per_epoch = self.config.steps_per_epoch(dataset.len());
        let total = self.config.total_steps(dataset.len());
        let done = self.step as usize;
        if done % per_epoch != 0 || done > total {
            return Err(Error::InvalidData {
                location: "trainer".into(),
                message: format!(
                    "step {done} is not an epoch boundary of a {total}-step run"
                ),
            });
        }
        let batch_size = self.config.batch_size();
        for epoch in done / per_epoch..self.config.epochs {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut self.rng);
            for idx in order.chunks(batch_size) {
                let batch: Vec<EncodedExample> = idx.iter().map(|&i| dataset[i].clone()).collect();
                let metrics = self.train_step(&batch, total)?;
                on_step(&metrics)?;
            }
            on_epoch(epoch + 1, self)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub tokens: usize,
    /// Token-weighted mean response NLL (nats per token).
    pub mean_nll: f64,
    pub perplexity: f64,
}

/// Response NLL and perplexity over a dataset.
pub fn evaluate(params: &ModelParams, dataset: &[EncodedExample]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example: Vec<(f64, usize)> = dataset
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let (logits, layout) = params.logits_var(&mut tape, ex)?;
            let tokens = response_targets(&layout)?.len();
            let nll = response_nll(tape.value(logits), &layout, LossReduction::Sum)?;
            Ok((nll, tokens))
        })
        .collect::<Result<_>>()?;
    let total: f64 = per_example.iter().map(|p| p.0).sum();
    let tokens: usize = per_example.iter().map(|p| p.1).sum();
    let mean_nll = total / tokens as f64;
    Ok(EvalReport {
        examples: dataset.len(),
        tokens,
        mean_nll,
        perplexity: mean_nll.exp(),
    })
}
