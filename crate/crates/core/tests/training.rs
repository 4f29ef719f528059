mod common;

use macaw_core::checkpoint::Checkpoint;
use macaw_core::training::{AdamState, StepMetrics};
use macaw_core::{evaluate, EncodedExample, Error, ModalityConfig, TrainConfig, Trainer, Vocab};

fn dataset(n: usize) -> Vec<EncodedExample> {
    let vocab = Vocab::default();
    let cfg = ModalityConfig::default();
    (0..n)
        .map(|i| {
            common::trimodal_example(
                &vocab,
                &cfg,
                &format!("media-{i}"),
                &format!("Describe clip {i}."),
                ["a cat", "rain", "two birds", "a red car"][i % 4],
            )
        })
        .collect()
}

fn train_config(micro_batch: usize, grad_accum: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        micro_batch,
        grad_accum,
        epochs: 2,
        max_seq_len: 128,
        ..TrainConfig::default()
    }
}

/// A 4×3 accumulated update equals a single 12-example update.
pub fn accumulation_gap() -> f64 {
    let data = dataset(12);
    let mut a = Trainer::new(common::toy_params(3), train_config(4, 3)).unwrap();
    let mut b = Trainer::new(common::toy_params(3), train_config(12, 1)).unwrap();
    a.train_step(&data, 10).unwrap();
    b.train_step(&data, 10).unwrap();
    a.params
        .store
        .iter()
        .zip(b.params.store.iter())
        .map(|((_, _, x), (_, _, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max)
}

#[test]
fn accumulation_matches_single_batch() {
    let gap = accumulation_gap();
    assert!(gap <= 1e-10, "{gap}");
}

#[test]
fn uneven_micro_batches_are_weighted_by_size() {
    let data = dataset(7);
    let a = Trainer::new(common::toy_params(3), train_config(3, 3)).unwrap();
    let b = Trainer::new(common::toy_params(3), train_config(7, 1)).unwrap();
    let (la, ga) = a.accumulated_gradient(&data).unwrap();
    let (lb, gb) = b.accumulated_gradient(&data).unwrap();
    assert!((la - lb).abs() < 1e-12);
    for (x, y) in ga.iter().zip(&gb) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn fixed_batch_loss_strictly_decreases() {
    let data = dataset(4);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_ratio: 1e-4,
        micro_batch: 4,
        grad_accum: 1,
        max_seq_len: 128,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(common::toy_params(0), cfg).unwrap();
    let mut prev = f64::INFINITY;
    for step in 0..21 {
        let m = t.train_step(&data, 1000).unwrap();
        if step > 0 {
            assert!(m.loss < prev, "step {step}: {} !< {prev}", m.loss);
        }
        prev = m.loss;
    }
}

fn run(trainer: &mut Trainer, data: &[EncodedExample]) -> Vec<StepMetrics> {
    let mut log = Vec::new();
    trainer
        .fit(data, |m| {
            log.push(*m);
            Ok(())
        }, |_, _| Ok(()))
        .unwrap();
    log
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = dataset(10);
    let mut a = Trainer::new(common::toy_params(5), train_config(2, 2)).unwrap();
    let mut b = Trainer::new(common::toy_params(5), train_config(2, 2)).unwrap();
    assert_eq!(run(&mut a, &data), run(&mut b, &data));
    let vocab = Vocab::default();
    assert_eq!(
        Checkpoint::new(vocab, a).to_bytes(),
        Checkpoint::new(vocab, b).to_bytes()
    );
}

#[test]
fn resume_continues_bitwise() {
    let data = dataset(10);
    let cfg = TrainConfig {
        epochs: 3,
        ..train_config(2, 2)
    };
    let mut full = Trainer::new(common::toy_params(6), cfg.clone()).unwrap();
    let mut saved = None;
    let mut full_log = Vec::new();
    full.fit(
        &data,
        |m| {
            full_log.push(*m);
            Ok(())
        },
        |epoch, t| {
            if epoch == 1 {
                saved = Some(Checkpoint::new(Vocab::default(), t.clone()).to_bytes());
            }
            Ok(())
        },
    )
    .unwrap();

    let mut resumed = Checkpoint::from_bytes(&saved.unwrap()).unwrap().trainer;
    let per_epoch = cfg.steps_per_epoch(data.len());
    assert_eq!(resumed.step as usize, per_epoch);
    let tail = run(&mut resumed, &data);
    assert_eq!(tail, full_log[per_epoch..]);
    assert_eq!(resumed.params, full.params);
}

#[test]
fn resume_off_boundary_rejected() {
    let data = dataset(10);
    let mut t = Trainer::new(common::toy_params(6), train_config(2, 2)).unwrap();
    t.train_step(&data[..4], 6).unwrap();
    assert!(matches!(t.fit(&data, |_| Ok(()), |_, _| Ok(())), Err(Error::InvalidData { .. })));
}

#[test]
fn untrained_perplexity_near_vocab_size() {
    let report = evaluate(&common::toy_params(0), &dataset(8)).unwrap();
    assert!((report.perplexity / 260.0 - 1.0).abs() <= 0.15, "{report:?}");
    assert!((report.perplexity - report.mean_nll.exp()).abs() < 1e-9);
    assert!(matches!(evaluate(&common::toy_params(0), &[]), Err(Error::EmptyDataset)));
}

#[test]
fn frozen_embeddings_stay_put() {
    let data = dataset(4);
    let cfg = TrainConfig {
        freeze_embeddings: true,
        ..train_config(4, 1)
    };
    let mut t = Trainer::new(common::toy_params(1), cfg).unwrap();
    let before = t.params.embedding().clone();
    let other = t.params.store.get(t.params.decoder.final_norm_gain).clone();
    t.train_step(&data, 10).unwrap();
    t.train_step(&data, 10).unwrap();
    assert_eq!(t.params.embedding(), &before);
    assert_ne!(t.params.store.get(t.params.decoder.final_norm_gain), &other);
}

#[test]
fn clipping_bounds_the_update_input() {
    let data = dataset(4);
    let cfg = TrainConfig {
        max_grad_norm: Some(1e-3),
        ..train_config(4, 1)
    };
    let mut clipped = Trainer::new(common::toy_params(1), cfg).unwrap();
    let m = clipped.train_step(&data, 10).unwrap();
    assert!(m.grad_norm > 1e-3, "reported norm is the pre-clip norm");
    let (_, mut g) = clipped.accumulated_gradient(&data).unwrap();
    let n = g.iter().map(|t| t.sq_norm()).sum::<f64>().sqrt();
    g.iter_mut().for_each(|t| t.scale_assign(1e-3 / n));
    let mut opt = AdamState::new(&clipped.params);
    let mut p = clipped.params.clone();
    opt.apply(&mut p, &g, 1e-3, &clipped.config);
    assert!(p.store.iter().all(|(_, _, t)| t.all_finite()));
}

#[test]
fn sequence_length_limit_enforced() {
    let data = dataset(2);
    let cfg = TrainConfig {
        max_seq_len: 20,
        ..train_config(2, 1)
    };
    let mut t = Trainer::new(common::toy_params(1), cfg).unwrap();
    assert!(matches!(t.train_step(&data, 4), Err(Error::SequenceTooLong { .. })));
}
