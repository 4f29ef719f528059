//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::time::Instant;

use macaw_cli::{dispatch, CHECKPOINT_FILE, FIXTURES_ENV, INSTRUCTIONS_FILE, METRICS_FILE};
use macaw_core::alignment::{align, assemble_prefix, transform, transform_geometry, SequenceLayout};
use macaw_core::checkpoint::Checkpoint;
use macaw_core::dataset::{encode_examples, load_examples, parse_qa_pairs};
use macaw_core::encoders::{stub_encode, MediaRef, ModalitySpec};
use macaw_core::numerics::{finite_diff_check, GradCheckOptions, Tape, Tensor};
use macaw_core::training::{example_loss_var, lr_at, response_nll, LossReduction};
use macaw_core::{
    evaluate, DecoderConfig, EncodedExample, ModalityConfig, ModalityKind, ModelParams, RunConfig,
    TrainConfig, Trainer, Vocab,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = dispatch(std::iter::once("macaw").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8_lossy(&out).into_owned(), String::from_utf8_lossy(&err).into_owned())
}

fn cli_ok(args: &[&str]) -> Result<String, String> {
    match cli(args) {
        (0, out, _) => Ok(out),
        (code, _, err) => Err(format!("`{}` exited {code}: {}", args.join(" "), err.trim())),
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn toy_decoder() -> DecoderConfig {
    DecoderConfig {
        d_model: 16,
        layers: 2,
        heads: 2,
        ffn_width: 32,
        max_seq_len: 128,
        ..DecoderConfig::default()
    }
}

fn features(kind: ModalityKind, tag: &str, cfg: &ModalityConfig) -> macaw_core::ModalityFeatures {
    stub_encode(&MediaRef::from_bytes(kind, tag.as_bytes()), cfg).unwrap()
}

fn trimodal(tag: &str, instr: &str, resp: &str) -> EncodedExample {
    let cfg = ModalityConfig::default();
    let f = ModalityKind::ALL.iter().map(|&k| features(k, tag, &cfg)).collect();
    EncodedExample::from_text(&Vocab::default(), f, instr, Some(resp)).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    // Weights drawn with std 0.3: at 0.02 the alignment is nearly uniform and
    // many probed gradients fall below what h = 1e-5 can resolve.
    let dec = DecoderConfig {
        init_std: 0.3,
        ..toy_decoder()
    };
    let params = ModelParams::init(&dec, &ModalityConfig::default(), 1).unwrap();
    let ex = trimodal("g", "What is it?", "a cat");
    let mut tape = Tape::new();
    let loss = example_loss_var(&mut tape, &params, &ex, LossReduction::Mean).unwrap();
    let analytic = tape.backward(loss, &params.store).unwrap();
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        samples: Some(200),
        seed: 5,
        min_pass_fraction: 0.99,
    };
    let mut scratch = params.clone();
    let report = finite_diff_check(
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
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{}/{} probes within 1e-4 (max rel err {:.2e}), E and conv kernels probed, {secs:.1}s",
        report.within_tolerance, report.checked, report.max_rel_err
    );
    check(report.checked == 200 && report.pass_fraction() >= 0.99, || detail.clone())?;
    check(secs < 60.0, || detail.clone())?;
    Ok(detail)
}

fn alignment_convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_neg, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let v = rng.random_range(2..10);
        let d = v + rng.random_range(1..8);
        let l = rng.random_range(1..6);
        let rand_m = |rng: &mut ChaCha8Rng, r: usize, c: usize, a: f64| {
            Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-a..a)).collect()).unwrap()
        };
        let e = rand_m(&mut rng, v, d, 1.0);
        let h = rand_m(&mut rng, l, d, 2.0);
        let out = align(ModalityKind::Image, &h, &e).unwrap();
        let em = DMatrix::from_row_slice(v, d, e.data());
        let gram = (&em * em.transpose()).lu();
        for i in 0..l {
            let w = gram
                .solve(&(&em * DVector::from_column_slice(out.matrix.row(i))))
                .ok_or("singular E")?;
            worst_neg = worst_neg.min(w.min());
            worst_sum = worst_sum.max((w.sum() - 1.0).abs());
        }
    }
    let detail = format!("100 cases, min weight {worst_neg:.2e}, max |sum - 1| {worst_sum:.2e}");
    check(worst_neg >= -1e-9 && worst_sum <= 1e-6, || detail.clone())?;
    Ok(detail)
}

fn shape_laws() -> Outcome {
    let mut lengths = 0;
    for out_len in 1..=8 {
        for len in out_len..=64 * out_len {
            let (stride, kernel) = transform_geometry(len, out_len).map_err(|e| e.to_string())?;
            check((len - kernel) / stride + 1 == out_len, || format!("L={len}, L'={out_len}"))?;
            lengths += 1;
        }
    }
    let dec = toy_decoder();
    for out_len in [1, 4, 8] {
        for len in [out_len, out_len * 3 + 1, out_len * 64] {
            let cfg = ModalityConfig {
                image: ModalitySpec { length: len, dim: 8, out_len },
                ..ModalityConfig::default()
            };
            let p = ModelParams::init(&dec, &cfg, 0).unwrap();
            let h = transform(&features(ModalityKind::Image, "s", &cfg), p.transform_for(ModalityKind::Image), &p.store)
                .map_err(|e| e.to_string())?;
            check(h.shape() == [out_len, 16], || format!("transform gave {:?} for L={len}, L'={out_len}", h.shape()))?;
        }
    }
    let cfg = ModalityConfig::default();
    let p = ModelParams::init(&dec, &cfg, 0).unwrap();
    let vocab = Vocab::default();
    let instr = macaw_core::model::frame_instruction(&vocab, "what is here").unwrap();
    for mask in 1u8..8 {
        let toks: Vec<_> = ModalityKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                (mask >> i & 1 == 1).then(|| {
                    let h = transform(&features(k, "x", &cfg), p.transform_for(k), &p.store).unwrap();
                    align(k, &h, p.embedding()).unwrap()
                })
            })
            .collect();
        let seq = assemble_prefix(toks[0].as_ref(), toks[1].as_ref(), toks[2].as_ref(), &instr, None, |ids| {
            p.decoder.embed_tokens(&p.store, ids)
        })
        .map_err(|e| e.to_string())?;
        let m = mask.count_ones() as usize;
        check(seq.len() == m * 4 + instr.len(), || format!("mask {mask:03b}: {}", seq.len()))?;
    }
    Ok(format!("{lengths} (L, L') pairs hit L' rows; 7 presence combinations give m*L' + T"))
}

fn learnability(work: &Path) -> Outcome {
    let start = Instant::now();
    let cfg_path = root().join("configs/overfit.json");
    let out = work.join("overfit");
    cli_ok(&["train", "--config", s(&cfg_path), "--out", s(&out)])?;
    let steps = std::fs::read_to_string(out.join(METRICS_FILE)).map_err(|e| e.to_string())?.lines().count();
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let raw = load_examples(cfg.data.train_path.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let data = encode_examples(&ck.vocab, &raw, &cfg.modality, None).map_err(|e| e.to_string())?;
    let report = evaluate(ck.params(), &data).map_err(|e| e.to_string())?;
    let mut exact = 0;
    for (ex, r) in data.iter().zip(&raw) {
        let ids = ck.params().generate(ex, 48).map_err(|e| e.to_string())?;
        exact += usize::from(ck.vocab.decode_lossy(&ids) == r.response);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{} examples, {steps} steps, NLL {:.4} nats/token (perplexity {:.4}), {exact}/16 exact, {secs:.0}s",
        data.len(),
        report.mean_nll,
        report.perplexity
    );
    check(data.len() == 16 && steps <= 300, || detail.clone())?;
    check(report.mean_nll < 0.1 && report.perplexity < 1.12, || detail.clone())?;
    check(exact >= 14 && secs < 300.0, || detail.clone())?;
    Ok(detail)
}

fn schedule_fidelity() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 1000;
    let warm = cfg.warmup_steps(total);
    let mid = warm + (total - warm) / 2;
    let rel = |x: f64, want: f64| if want == 0.0 { x.abs() } else { (x - want).abs() / want };
    let pts = [(0, 0.0), (warm, 3e-5), (mid, 1.5e-5), (total, 0.0)];
    for (step, want) in pts {
        let got = lr_at(step, total, &cfg);
        check(rel(got, want) <= 1e-12, || format!("lr_at({step}) = {got:e}, want {want:e}"))?;
    }
    Ok(format!("T={total}: lr(0)=0, lr({warm})=3e-5, lr({mid})=1.5e-5, lr({total})=0"))
}

fn config_fidelity() -> Outcome {
    let cfg = RunConfig::load(&root().join("configs/default.json")).map_err(|e| e.to_string())?;
    let t = &cfg.train;
    check(
        t.learning_rate == 3e-5
            && t.warmup_ratio == 0.03
            && t.epochs == 5
            && t.micro_batch == 4
            && t.grad_accum == 3
            && t.max_seq_len == 512,
        || format!("default config train section: {t:?}"),
    )?;
    let data: Vec<EncodedExample> = (0..12)
        .map(|i| trimodal(&format!("m{i}"), &format!("Describe clip {i}."), ["a cat", "rain", "two birds"][i % 3]))
        .collect();
    let make = |mb, ga| {
        let tc = TrainConfig {
            learning_rate: 1e-3,
            micro_batch: mb,
            grad_accum: ga,
            max_seq_len: 128,
            ..TrainConfig::default()
        };
        Trainer::new(ModelParams::init(&toy_decoder(), &ModalityConfig::default(), 3).unwrap(), tc).unwrap()
    };
    let (mut a, mut b) = (make(4, 3), make(12, 1));
    for _ in 0..2 {
        a.train_step(&data, 10).map_err(|e| e.to_string())?;
        b.train_step(&data, 10).map_err(|e| e.to_string())?;
    }
    let gap = a
        .params
        .store
        .iter()
        .zip(b.params.store.iter())
        .map(|((_, _, x), (_, _, y))| x.max_abs_diff(y))
        .fold(0.0, f64::max);
    let detail = format!("defaults 3e-5/0.03/5/4/3/512; 4x3 accumulated vs 12x1 update gap {gap:.1e}");
    check(gap <= 1e-10, || detail.clone())?;
    Ok(detail)
}

fn dataset_pipeline(work: &Path) -> Outcome {
    let out = work.join("build");
    let caps = root().join("fixtures/dataset/captions.jsonl");
    cli_ok(&["dataset-build", "--data", s(&caps), "--out", s(&out)])?;
    let built = std::fs::read_to_string(out.join(INSTRUCTIONS_FILE)).map_err(|e| e.to_string())?;
    let golden = std::fs::read_to_string(root().join("fixtures/dataset/golden.jsonl")).map_err(|e| e.to_string())?;
    check(built.lines().count() == 50, || format!("{} examples", built.lines().count()))?;
    check(built == golden, || "built JSONL differs from golden".into())?;

    let pairs = parse_qa_pairs(
        "Q: Can you describe the color of the river in the image? \n\n\
         A: The river in the image appears to be a tranquil shade of blue.",
    )
    .map_err(|e| e.to_string())?;
    check(
        pairs[0].0 == "Can you describe the color of the river in the image?"
            && pairs[0].1 == "The river in the image appears to be a tranquil shade of blue.",
        || format!("{:?}", pairs[0]),
    )?;

    let stats = cli_ok(&["dataset-stats", "--data", s(&root().join("fixtures/stats/examples.jsonl"))])?;
    let rows: Vec<Vec<&str>> = stats.lines().skip(1).map(|l| l.split_whitespace().collect()).collect();
    // Hand counts: COCO 16/3 and 14/3 words, AVSD 12/2 and 17/2.
    let expect = [("COCO", "3", 16.0 / 3.0, 14.0 / 3.0), ("AVSD", "2", 6.0, 8.5)];
    check(rows.len() == 2, || stats.clone())?;
    for (row, (name, items, ins, res)) in rows.iter().zip(expect) {
        let num = |i: usize| row[i].parse::<f64>().unwrap_or(f64::NAN);
        check(
            row[0] == name && row[1] == items && (num(2) - ins).abs() <= 0.1 && (num(3) - res).abs() <= 0.1,
            || format!("row {row:?}"),
        )?;
    }
    Ok("50 examples match golden; reference pair parsed verbatim; stats within 0.1 of hand counts".into())
}

fn end_to_end(work: &Path, tag: &str) -> Result<(Vec<u8>, Vec<u8>, String), String> {
    let dir = work.join(tag);
    let built = dir.join("data");
    cli_ok(&["dataset-build", "--data", s(&root().join("fixtures/dataset/captions.jsonl")), "--out", s(&built), "--seed", "7"])?;
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"d_model": 16, "heads": 2, "ffn_width": 32, "max_seq_len": 256},
            "train": {"learning_rate": 1e-3, "epochs": 2, "micro_batch": 4, "grad_accum": 2, "max_seq_len": 256},
            "data": {"train_path": "data/instructions.jsonl", "eval_path": "data/instructions.jsonl"}}"#,
    )
    .map_err(|e| e.to_string())?;
    let run = dir.join("run");
    cli_ok(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "7"])?;
    let ck = run.join(CHECKPOINT_FILE);
    let report = cli_ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ck)])?;
    let read = |p: PathBuf| std::fs::read(p).map_err(|e| e.to_string());
    Ok((read(ck)?, read(run.join(METRICS_FILE))?, report))
}

fn determinism(work: &Path) -> Outcome {
    let a = end_to_end(work, "e2e-a")?;
    let b = end_to_end(work, "e2e-b")?;
    check(a.0 == b.0, || "checkpoints differ".into())?;
    check(a.1 == b.1, || "metrics logs differ".into())?;
    check(a.2 == b.2, || format!("eval reports differ: {} vs {}", a.2.trim(), b.2.trim()))?;
    let steps = String::from_utf8_lossy(&a.1).lines().count();
    Ok(format!("dataset-build, train ({steps} steps), eval twice: checkpoint ({} bytes), metrics, report identical", a.0.len()))
}

fn causality_and_masking() -> Outcome {
    let p = ModelParams::init(&toy_decoder(), &ModalityConfig::default(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fwd = |ids: &[usize]| {
        p.decoder
            .forward_embedded(&p.store, &p.decoder.embed_tokens(&p.store, ids).unwrap())
            .unwrap()
    };
    for case in 0..20 {
        let len = rng.random_range(2..60);
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..260)).collect();
        let j = rng.random_range(1..len);
        let mut edited = ids.clone();
        edited[j] = (edited[j] + 1 + rng.random_range(0..258)) % 260;
        let (a, b) = (fwd(&ids), fwd(&edited));
        for i in 0..j {
            let moved = a.row(i).iter().zip(b.row(i)).any(|(x, y)| (x - y).abs() > 1e-12);
            check(!moved, || format!("case {case}: row {i} changed after editing position {j}"))?;
        }
    }
    for case in 0..20 {
        let n_i = rng.random_range(1..12);
        let n_r = rng.random_range(1..8);
        let instr: Vec<usize> = (0..n_i).map(|_| rng.random_range(0..260)).collect();
        let fuzz: Vec<usize> = (0..n_i).map(|_| rng.random_range(0..260)).collect();
        let resp: Vec<usize> = (0..n_r).map(|_| rng.random_range(0..260)).collect();
        let soft = [(ModalityKind::Image, 4), (ModalityKind::Audio, 4)];
        let la = SequenceLayout::new(&soft, &instr, Some(&resp)).unwrap();
        let lb = SequenceLayout::new(&soft, &fuzz, Some(&resp)).unwrap();
        let total = la.total_len();
        let logits = Tensor::new(vec![total, 260], (0..total * 260).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let x = response_nll(&logits, &la, LossReduction::Mean).unwrap();
        let y = response_nll(&logits, &lb, LossReduction::Mean).unwrap();
        check(x == y, || format!("case {case}: {x} vs {y}"))?;
    }
    Ok("20 causality cases, 20 instruction-target fuzz cases".into())
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    // Single-threaded at this point; nothing else reads the environment yet.
    std::env::set_var(FIXTURES_ENV, root().join("fixtures/dataset/completions"));
    let w = work.path();
    let criteria: [(&str, &dyn Fn() -> Outcome); 9] = [
        ("gradient fidelity", &gradient_fidelity),
        ("alignment convexity", &alignment_convexity),
        ("shape laws", &shape_laws),
        ("learnability", &|| learnability(w)),
        ("schedule fidelity", &schedule_fidelity),
        ("config fidelity", &config_fidelity),
        ("dataset pipeline", &|| dataset_pipeline(w)),
        ("determinism", &|| determinism(w)),
        ("causality and masking", &causality_and_masking),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    println!("acceptance: {}/9 criteria passed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
