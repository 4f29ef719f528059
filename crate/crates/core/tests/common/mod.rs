#![allow(dead_code)]

use std::path::{Path, PathBuf};

use macaw_core::dataset::{encode_examples, load_examples};
use macaw_core::numerics::{finite_diff_check, GradCheckOptions, GradCheckReport, Tape};
use macaw_core::training::{example_loss_var, LossReduction};
use macaw_core::encoders::{stub_encode, MediaRef};
use macaw_core::{
    DecoderConfig, EncodedExample, ModalityConfig, ModalityFeatures, ModalityKind, ModelParams,
    RunConfig, Vocab,
};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(rel: &str) -> PathBuf {
    repo_root().join("fixtures").join(rel)
}

/// d_e = 16, two layers, V = 260, L' = 4 for every modality.
pub fn toy_decoder() -> DecoderConfig {
    DecoderConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        ffn_width: 32,
        max_seq_len: 128,
        ..DecoderConfig::default()
    }
}

pub fn features(kind: ModalityKind, tag: &str, cfg: &ModalityConfig) -> ModalityFeatures {
    stub_encode(&MediaRef::from_bytes(kind, tag.as_bytes()), cfg).unwrap()
}

/// One example carrying all three modalities.
pub fn trimodal_example(vocab: &Vocab, cfg: &ModalityConfig, tag: &str, instr: &str, resp: &str) -> EncodedExample {
    let f = ModalityKind::ALL
        .iter()
        .map(|&k| features(k, tag, cfg))
        .collect();
    EncodedExample::from_text(vocab, f, instr, Some(resp)).unwrap()
}

pub fn overfit_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/overfit.json")).unwrap()
}

pub fn overfit_data(cfg: &RunConfig) -> (Vec<macaw_core::InstructionExample>, Vec<EncodedExample>) {
    let path = cfg.data.train_path.clone().unwrap();
    let raw = load_examples(&path).unwrap();
    let vocab = Vocab::new(cfg.model.vocab_size).unwrap();
    let enc = encode_examples(&vocab, &raw, &cfg.modality, cfg.data.media_root.as_deref()).unwrap();
    (raw, enc)
}

pub fn toy_params(seed: u64) -> ModelParams {
    ModelParams::init(&toy_decoder(), &ModalityConfig::default(), seed).unwrap()
}

/// Full-pipeline gradient check: stub features through transform, alignment,
/// decoder, and masked response NLL, probing `samples` scalars spread over
/// every parameter tensor. Weights are drawn with std 0.3 so that no probed
/// gradient is small enough to drown in finite-difference roundoff.
pub fn pipeline_gradcheck(samples: usize, probe_seed: u64) -> GradCheckReport {
    let dec = DecoderConfig {
        init_std: 0.3,
        ..toy_decoder()
    };
    let cfg = ModalityConfig::default();
    let params = ModelParams::init(&dec, &cfg, 1).unwrap();
    let ex = trimodal_example(&Vocab::default(), &cfg, "g", "What is it?", "a cat");
    let mut tape = Tape::new();
    let loss = example_loss_var(&mut tape, &params, &ex, LossReduction::Mean).unwrap();
    let analytic = tape.backward(loss, &params.store).unwrap();
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        samples: Some(samples),
        seed: probe_seed,
        min_pass_fraction: 0.99,
    };
    let mut scratch = params.clone();
    finite_diff_check(
        |store| {
            scratch.store = store.clone();
            let mut t = Tape::new();
            let l = example_loss_var(&mut t, &scratch, &ex, LossReduction::Mean)?;
            t.value(l).item()
        },
        &params.store,
        &analytic,
        &opts,
    )
    .unwrap()
}
