//! `macaw` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 config error, 3 data error,
//! 4 runtime error. Reports go to standard output, diagnostics to standard
//! error as a single line.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use macaw_core::checkpoint::Checkpoint;
use macaw_core::dataset::{
    encode_examples, generate_examples, group_by_source, load_examples, mix, read_jsonl, stats,
    write_jsonl, CaptionRecord, GenerationOptions, MockClient, RetryPolicy, RetryingClient,
};
use macaw_core::encoders::{resolve_features, MediaRef, FEATURE_EXTENSION};
use macaw_core::{
    evaluate, EncodedExample, Error, ModalityKind, ModelParams, RunConfig, StepMetrics, Trainer,
    Vocab,
};

/// Environment variable naming the mock client's fixtures directory.
pub const FIXTURES_ENV: &str = "MACAW_FIXTURES";

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mcwc";
pub const LAST_EPOCH_FILE: &str = "last-epoch.mcwc";
pub const INSTRUCTIONS_FILE: &str = "instructions.jsonl";
pub const SKIPPED_FILE: &str = "skipped.jsonl";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "macaw", version, about = "Multi-modal instruction tuning at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn captions into instruction/response pairs through the completion client.
    DatasetBuild(BuildArgs),
    /// Print per-source item counts and average instruction/response lengths.
    DatasetStats(StatsArgs),
    /// Fine-tune a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Report mean response NLL and perplexity of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Greedily decode a response for one instruction and optional media.
    Generate(GenerateArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct BuildArgs {
    #[command(flatten)]
    common: Common,
    /// Caption JSONL; overrides `data.captions_path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Instruction JSONL.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Instruction JSONL; overrides `data.train_path`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and metrics log.
    #[arg(long)]
    out: PathBuf,
    /// Resume from this checkpoint (saved at an epoch boundary).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Instruction JSONL; overrides `data.eval_path`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Media file, optionally prefixed with its kind (`audio:clip.wav`).
    /// Repeat for several modalities.
    #[arg(long)]
    media: Vec<String>,
    #[arg(long)]
    instruction: String,
    /// Upper bound on generated tokens.
    #[arg(long, default_value_t = 64)]
    max_new: usize,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } => EXIT_CONFIG,
            Error::Io { .. }
            | Error::Json(_)
            | Error::InvalidData { .. }
            | Error::EmptyDataset
            | Error::EmptyCaption(_)
            | Error::NoPairsFound
            | Error::SourceTooSmall { .. }
            | Error::UnknownKind(_)
            | Error::MissingText
            | Error::InvalidUtf8
            | Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::TruncatedFile(_)
            | Error::CorruptPayload(_)
            | Error::BadLength { .. }
            | Error::SequenceTooLong { .. } => EXIT_DATA,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `argv` (program name first), runs the subcommand, and returns the
/// exit code.
pub fn dispatch<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(stderr, "{}", e.render());
                    EXIT_USAGE
                }
                _ => {
                    let text = e.render().to_string();
                    let line = text.lines().next().unwrap_or("usage error");
                    let _ = writeln!(stderr, "{line}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::DatasetBuild(a) => dataset_build(a, stdout),
        Command::DatasetStats(a) => dataset_stats(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Generate(a) => generate(a, stdout),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message.replace('\n', " "));
            f.code
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Failure::usage(format!("no {what} given (pass --data or set it in the config)")))
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn dataset_build(args: BuildArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(&args.common)?;
    let captions_path = pick(args.data, &cfg.data.captions_path, "caption file")?;
    let fixtures = std::env::var_os(FIXTURES_ENV).ok_or_else(|| Failure {
        code: EXIT_CONFIG,
        message: format!("{FIXTURES_ENV} is not set; no completion client is available"),
    })?;
    let captions: Vec<CaptionRecord> = read_jsonl(&captions_path)?;
    create_dir(&args.out)?;

    let client = RetryingClient::new(MockClient::new(PathBuf::from(fixtures)), RetryPolicy::default());
    let opts = GenerationOptions {
        concurrency: cfg.data.concurrency,
        max_tokens: cfg.data.max_tokens,
        temperature: cfg.data.temperature,
    };
    let out_path = args.out.join(INSTRUCTIONS_FILE);
    let skip_path = args.out.join(SKIPPED_FILE);
    let output = match generate_examples(&captions, &client, &opts) {
        Ok(o) => o,
        Err(partial) => {
            write_jsonl(&out_path, &partial.output.examples)?;
            write_jsonl(&skip_path, &partial.output.skipped)?;
            return Err(Failure {
                code: EXIT_RUNTIME,
                message: format!("{partial}; partial results in {}", args.out.display()),
            });
        }
    };
    let examples = match cfg.data.mix_per_source {
        Some(n) => mix(&group_by_source(&output.examples), n, cfg.data.seed)?,
        None => output.examples,
    };
    write_jsonl(&out_path, &examples)?;
    write_jsonl(&skip_path, &output.skipped)?;
    writeln!(
        stdout,
        "captions {} examples {} skipped {} -> {}",
        captions.len(),
        examples.len(),
        output.skipped.len(),
        out_path.display()
    )
    .map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn dataset_stats(args: StatsArgs, stdout: &mut dyn Write) -> CmdResult {
    let examples = load_examples(&args.data)?;
    let table = stats(&examples)?;
    write!(stdout, "{table}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn encode_file(cfg: &RunConfig, vocab: &Vocab, path: &Path) -> Result<Vec<EncodedExample>, Failure> {
    let examples = load_examples(path)?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(encode_examples(vocab, &examples, &cfg.modality, cfg.data.media_root.as_deref())?)
}

fn train(args: TrainArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(&args.common)?;
    let data_path = pick(args.data, &cfg.data.train_path, "training data")?;
    let vocab = Vocab::new(cfg.model.vocab_size)?;
    let data = encode_file(&cfg, &vocab, &data_path)?;
    create_dir(&args.out)?;

    let (mut trainer, append) = match &args.checkpoint {
        Some(p) => (Checkpoint::load(p)?.trainer, true),
        None => {
            let params = ModelParams::init(&cfg.model, &cfg.modality, cfg.train.seed)?;
            (Trainer::new(params, cfg.train.clone())?, false)
        }
    };

    let metrics_path = args.out.join(METRICS_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(|e| io_failure(&metrics_path, e))?;
    let metrics = std::cell::RefCell::new(BufWriter::new(file));
    let mut last: Option<StepMetrics> = None;
    let epoch_path = args.out.join(LAST_EPOCH_FILE);

    trainer.fit(
        &data,
        |m| {
            if !m.loss.is_finite() {
                return Err(Error::InvalidData {
                    location: format!("step {}", m.step),
                    message: "loss is not finite".into(),
                });
            }
            let line = serde_json::to_string(m).expect("metrics serialize");
            writeln!(metrics.borrow_mut(), "{line}").map_err(|e| Error::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
            last = Some(*m);
            Ok(())
        },
        |_, t| {
            metrics.borrow_mut().flush().map_err(|e| Error::Io {
                path: metrics_path.clone(),
                source: e,
            })?;
            Checkpoint::new(vocab, t.clone()).save(&epoch_path)
        },
    )?;
    metrics
        .into_inner()
        .flush()
        .map_err(|e| io_failure(&metrics_path, e))?;

    let ck_path = args.out.join(CHECKPOINT_FILE);
    Checkpoint::new(vocab, trainer).save(&ck_path)?;
    let summary = match last {
        Some(m) => format!("step {} loss {:.6} -> {}", m.step, m.loss, ck_path.display()),
        None => format!("no steps run -> {}", ck_path.display()),
    };
    writeln!(stdout, "{summary}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

fn eval(args: EvalArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(&args.common)?;
    let data_path = pick(args.data, &cfg.data.eval_path, "evaluation data")?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let run = RunConfig {
        modality: ck.params().modality.clone(),
        ..cfg
    };
    let data = encode_file(&run, &ck.vocab, &data_path)?;
    let report = evaluate(ck.params(), &data)?;
    let line = serde_json::to_string(&report).expect("report serializes");
    writeln!(stdout, "{line}").map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}

/// Splits `kind:path`, or infers the kind from the file (feature header or
/// extension).
fn media_kind(spec: &str) -> Result<(ModalityKind, String), Failure> {
    if let Some((k, p)) = spec.split_once(':') {
        if let Ok(kind) = k.parse::<ModalityKind>() {
            return Ok((kind, p.to_string()));
        }
    }
    let path = Path::new(spec);
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let kind = match ext.as_str() {
        e if e == FEATURE_EXTENSION => macaw_core::encoders::load_features(path)?.kind,
        "jpg" | "jpeg" | "png" | "gif" | "bmp" | "webp" => ModalityKind::Image,
        "mp4" | "avi" | "mov" | "mkv" | "webm" => ModalityKind::Video,
        "wav" | "mp3" | "flac" | "ogg" | "m4a" => ModalityKind::Audio,
        _ => {
            return Err(Failure::usage(format!(
                "cannot tell the modality of `{spec}`; prefix it with image:, video:, or audio:"
            )))
        }
    };
    Ok((kind, spec.to_string()))
}

fn generate(args: GenerateArgs, stdout: &mut dyn Write) -> CmdResult {
    let cfg = load_config(&args.common)?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let params = ck.params();
    let mut features = Vec::with_capacity(args.media.len());
    for spec in &args.media {
        let (kind, path) = media_kind(spec)?;
        let media = MediaRef::resolve(kind, &path, cfg.data.media_root.as_deref())?;
        features.push(resolve_features(&media, &params.modality)?);
    }
    let ex = EncodedExample::from_text(&ck.vocab, features, &args.instruction, None)?;
    let prefix_len = ex
        .features
        .iter()
        .map(|f| params.modality.spec(f.kind).out_len)
        .sum::<usize>()
        + ex.instruction_ids.len();
    let room = params.config().max_seq_len.saturating_sub(prefix_len);
    if room == 0 {
        return Err(Error::SequenceTooLong {
            len: prefix_len,
            max: params.config().max_seq_len,
        }
        .into());
    }
    let ids = params.generate(&ex, args.max_new.min(room))?;
    writeln!(stdout, "{}", ck.vocab.decode_lossy(&ids)).map_err(|e| io_failure(Path::new("<stdout>"), e))?;
    Ok(())
}
