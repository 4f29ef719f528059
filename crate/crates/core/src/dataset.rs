//! Instruction data: caption → prompt → completion → (instruction, response)
//! pairs, plus per-source mixing and summary statistics.
//!
//! Records are exchanged as JSONL, one object per line:
//! `{"id", "source", "media": [{"kind", "path"}], "instruction", "response"}`.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::encoders::{fingerprint, resolve_features, MediaRef, ModalityConfig, ModalityKind};
use crate::model::EncodedExample;
use crate::tokenizer::Vocab;
use crate::error::{Error, Result};

/// Pairs requested per prompt, and the most kept per completion.
pub const PAIRS_PER_PROMPT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    #[serde(rename = "COCO")]
    Coco,
    Charades,
    #[serde(rename = "AVSD")]
    Avsd,
    Alpaca,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Coco => "COCO",
            Source::Charades => "Charades",
            Source::Avsd => "AVSD",
            Source::Alpaca => "Alpaca",
            Source::Custom => "custom",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaEntry {
    pub kind: ModalityKind,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub media: Vec<MediaEntry>,
    pub caption: String,
    pub source: Source,
}

impl CaptionRecord {
    /// "video" when any attached media is video or audio, else "image".
    pub fn subject(&self) -> &'static str {
        if self.media.iter().all(|m| m.kind == ModalityKind::Image) {
            "image"
        } else {
            "video"
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::EmptyCaption(self.id.clone()));
        }
        if self.media.is_empty() {
            return Err(Error::InvalidData {
                location: format!("caption {}", self.id),
                message: "media list is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionExample {
    pub id: String,
    pub source: Source,
    /// Empty for text-only data.
    #[serde(default)]
    pub media: Vec<MediaEntry>,
    pub instruction: String,
    pub response: String,
}

impl InstructionExample {
    pub fn validate(&self) -> Result<()> {
        for (field, text) in [("instruction", &self.instruction), ("response", &self.response)] {
            if text.trim().is_empty() {
                return Err(Error::InvalidData {
                    location: format!("example {}", self.id),
                    message: format!("{field} is empty"),
                });
            }
        }
        Ok(())
    }
}

/// Parses one JSON value per non-empty line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::InvalidData {
            location: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(items).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Instruction examples from a JSONL file, validated.
pub fn load_examples(path: &Path) -> Result<Vec<InstructionExample>> {
    let examples: Vec<InstructionExample> = read_jsonl(path)?;
    for ex in &examples {
        ex.validate()?;
    }
    Ok(examples)
}

/// Fills the instruction-generation prompt for one caption.
pub fn build_prompt(caption: &CaptionRecord) -> Result<String> {
    let text = caption.caption.trim();
    if text.is_empty() {
        return Err(Error::EmptyCaption(caption.id.clone()));
    }
    let s = caption.subject();
    let article = if s == "image" { "an" } else { "a" };
    let text = text.strip_suffix('.').unwrap_or(text);
    Ok(format!(
        "This is the caption of {article} {s}: {text}. \
This {s} contains important information that needs to be conveyed through high-quality instructions.\n\n\
Your task is to provide ten pairs of instructions and responses that are related to the content of the {s} caption \
like dialogue concentrating on the content of the {s} without explicitly mentioning the caption or the word 'caption'.\n\n\
Your focus should be on describing, explaining, or analyzing various aspects of the {s}, as well as providing some QA pairs. \
The purpose of this exercise is to fine-tune a language model so that it can generate accurate and relevant responses.\n\n\
In each pair, the first line should start with \"Q:\" and contain an instruction related to the {s}, \
while the second line should start with \"A:\" and provide a response to the instruction.\n\n\
Please ensure that your instructions are diverse and of high quality, accurately reflecting the content of the image \
and providing useful information to the language model:"
    ))
}

/// Extracts up to ten `Q:`/`A:` pairs. A pair is a `Q:` line followed,
/// possibly after blank lines, by an `A:` line; any other line in between
/// abandons the pending question.
pub fn parse_qa_pairs(completion: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut pending: Option<String> = None;
    for line in completion.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(q) = line.strip_prefix("Q:") {
            pending = Some(q.trim().to_string());
        } else if let Some(a) = line.strip_prefix("A:") {
            if let Some(q) = pending.take() {
                let a = a.trim();
                if !q.is_empty() && !a.is_empty() {
                    pairs.push((q, a.to_string()));
                    if pairs.len() == PAIRS_PER_PROMPT {
                        break;
                    }
                }
            }
        } else {
            pending = None;
        }
    }
    if pairs.is_empty() {
        Err(Error::NoPairsFound)
    } else {
        Ok(pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
}

/// A text-completion service.
pub trait GenerationClient: Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse>;
}

/// Key under which a prompt's completion is stored: 16 hex digits of the
/// prompt's FNV-1a hash.
pub fn prompt_key(prompt: &str) -> String {
    format!("{:016x}", fingerprint(prompt.as_bytes()))
}

/// Offline client replaying `<prompt_key>.txt` files from a directory.
#[derive(Clone, Debug)]
pub struct MockClient {
    dir: PathBuf,
}

impl MockClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn fixture_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", prompt_key(prompt)))
    }
}

impl GenerationClient for MockClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let path = self.fixture_path(&request.prompt);
        std::fs::read_to_string(&path)
            .map(|text| CompletionResponse { text })
            .map_err(|e| Error::ClientError(format!("no fixture {}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff: Duration,
    /// Minimum spacing between consecutive requests.
    pub min_interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(500),
            min_interval: Duration::ZERO,
        }
    }
}

/// Wraps a client with retries, exponential backoff, and request spacing.
pub struct RetryingClient<C> {
    inner: C,
    policy: RetryPolicy,
    last_request: Mutex<Option<Instant>>,
}

impl<C: GenerationClient> RetryingClient<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self {
            inner,
            policy,
            last_request: Mutex::new(None),
        }
    }

    fn pace(&self) {
        if self.policy.min_interval.is_zero() {
            return;
        }
        let mut last = self.last_request.lock().expect("pacing lock");
        if let Some(t) = *last {
            let elapsed = t.elapsed();
            if elapsed < self.policy.min_interval {
                std::thread::sleep(self.policy.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

impl<C: GenerationClient> GenerationClient for RetryingClient<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse> {
        let mut attempt = 0;
        loop {
            self.pace();
            match self.inner.complete(request) {
                Ok(r) => return Ok(r),
                Err(Error::ClientError(msg)) if attempt < self.policy.max_retries => {
                    std::thread::sleep(self.policy.backoff * 2u32.pow(attempt));
                    attempt += 1;
                    let _ = msg;
                }
                Err(Error::ClientError(msg)) => {
                    return Err(Error::ClientError(format!(
                        "{msg} (after {} retries)",
                        self.policy.max_retries
                    )))
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOptions {
    /// Requests in flight at once.
    pub concurrency: usize,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            max_tokens: 2048,
            temperature: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub caption_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationOutput {
    pub examples: Vec<InstructionExample>,
    pub skipped: Vec<SkipEntry>,
}

/// A client failure that stopped generation; `output` holds everything
/// produced for the captions before the failing one.
#[derive(Debug)]
pub struct PartialGeneration {
    pub output: GenerationOutput,
    pub caption_id: String,
    pub error: Error,
}

impl fmt::Display for PartialGeneration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "generation stopped at caption {}: {} ({} examples kept)",
            self.caption_id,
            self.error,
            self.output.examples.len()
        )
    }
}

impl std::error::Error for PartialGeneration {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

enum CaptionOutcome {
    Pairs(Vec<(String, String)>),
    Skip(String),
    Failed(Error),
}

fn run_caption<C: GenerationClient + ?Sized>(
    caption: &CaptionRecord,
    client: &C,
    opts: &GenerationOptions,
) -> CaptionOutcome {
    if let Err(e) = caption.validate() {
        return CaptionOutcome::Skip(e.to_string());
    }
    let prompt = match build_prompt(caption) {
        Ok(p) => p,
        Err(e) => return CaptionOutcome::Skip(e.to_string()),
    };
    let request = CompletionRequest {
        prompt,
        max_tokens: opts.max_tokens,
        temperature: opts.temperature,
    };
    match client.complete(&request) {
        Ok(resp) => match parse_qa_pairs(&resp.text) {
            Ok(pairs) => CaptionOutcome::Pairs(pairs),
            Err(e) => CaptionOutcome::Skip(e.to_string()),
        },
        Err(e) => CaptionOutcome::Failed(e),
    }
}

/// One request per caption; every parsed pair becomes an example carrying
/// the caption's media. Output order follows input order regardless of the
/// order in which requests finish.
pub fn generate_examples<C: GenerationClient + ?Sized>(
    captions: &[CaptionRecord],
    client: &C,
    opts: &GenerationOptions,
) -> std::result::Result<GenerationOutput, PartialGeneration> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency.max(1))
        .build()
        .expect("generation thread pool");
    let outcomes: Vec<CaptionOutcome> = pool.install(|| {
        captions
            .par_iter()
            .map(|c| run_caption(c, client, opts))
            .collect()
    });
    let mut out = GenerationOutput::default();
    for (caption, outcome) in captions.iter().zip(outcomes) {
        match outcome {
            CaptionOutcome::Pairs(pairs) => {
                for (j, (instruction, response)) in pairs.into_iter().enumerate() {
                    out.examples.push(InstructionExample {
                        id: format!("{}-{}", caption.id, j + 1),
                        source: caption.source,
                        media: caption.media.clone(),
                        instruction,
                        response,
                    });
                }
            }
            CaptionOutcome::Skip(reason) => out.skipped.push(SkipEntry {
                caption_id: caption.id.clone(),
                reason,
            }),
            CaptionOutcome::Failed(error) => {
                return Err(PartialGeneration {
                    output: out,
                    caption_id: caption.id.clone(),
                    error,
                })
            }
        }
    }
    Ok(out)
}

/// Groups examples by source, in source order.
pub fn group_by_source(examples: &[InstructionExample]) -> Vec<(Source, Vec<InstructionExample>)> {
    let mut groups: Vec<(Source, Vec<InstructionExample>)> = Vec::new();
    for ex in examples {
        match groups.iter_mut().find(|(s, _)| *s == ex.source) {
            Some((_, g)) => g.push(ex.clone()),
            None => groups.push((ex.source, vec![ex.clone()])),
        }
    }
    groups.sort_by_key(|(s, _)| *s);
    groups
}

/// Samples `n_per_source` examples without replacement from each source,
/// concatenates the samples, and shuffles the result; one generator seeded
/// with `seed` drives all of it.
pub fn mix<S: fmt::Display>(
    sources: &[(S, Vec<InstructionExample>)],
    n_per_source: usize,
    seed: u64,
) -> Result<Vec<InstructionExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_source * sources.len());
    for (name, examples) in sources {
        if examples.len() < n_per_source {
            return Err(Error::SourceTooSmall {
                source_name: name.to_string(),
                available: examples.len(),
                requested: n_per_source,
            });
        }
        for i in index::sample(&mut rng, examples.len(), n_per_source) {
            out.push(examples[i].clone());
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SourceStats {
    pub source: Source,
    pub items: usize,
    pub avg_instruction_words: f64,
    pub avg_response_words: f64,
}

/// Per-source item counts and average whitespace-token lengths.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsTable {
    pub rows: Vec<SourceStats>,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn stats(examples: &[InstructionExample]) -> Result<StatsTable> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rows = group_by_source(examples)
        .into_iter()
        .map(|(source, group)| {
            let n = group.len() as f64;
            let ins: usize = group.iter().map(|e| word_count(&e.instruction)).sum();
            let res: usize = group.iter().map(|e| word_count(&e.response)).sum();
            SourceStats {
                source,
                items: group.len(),
                avg_instruction_words: ins as f64 / n,
                avg_response_words: res as f64 / n,
            }
        })
        .collect();
    Ok(StatsTable { rows })
}

fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for StatsTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>10} {:>10}", "Dataset", "Items", "Ins. Len.", "Res. Len.")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>10} {:>10.1} {:>10.1}",
                r.source.to_string(),
                group_thousands(r.items),
                r.avg_instruction_words,
                r.avg_response_words
            )?;
        }
        Ok(())
    }
}

/// Resolves an example's media to features and frames its text.
pub fn encode_example(
    vocab: &Vocab,
    ex: &InstructionExample,
    modality: &ModalityConfig,
    media_root: Option<&Path>,
) -> Result<EncodedExample> {
    let features = ex
        .media
        .iter()
        .map(|m| resolve_features(&MediaRef::resolve(m.kind, &m.path, media_root)?, modality))
        .collect::<Result<Vec<_>>>()?;
    EncodedExample::from_text(vocab, features, &ex.instruction, Some(&ex.response)).map_err(|e| {
        Error::InvalidData {
            location: format!("example {}", ex.id),
            message: e.to_string(),
        }
    })
}

pub fn encode_examples(
    vocab: &Vocab,
    examples: &[InstructionExample],
    modality: &ModalityConfig,
    media_root: Option<&Path>,
) -> Result<Vec<EncodedExample>> {
    examples
        .iter()
        .map(|ex| encode_example(vocab, ex, modality, media_root))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caption(id: &str, kind: ModalityKind, text: &str) -> CaptionRecord {
        CaptionRecord {
            id: id.into(),
            media: vec![MediaEntry {
                kind,
                path: format!("{id}.bin"),
            }],
            caption: text.into(),
            source: Source::Coco,
        }
    }

    #[test]
    fn prompt_wording_follows_media_kind() {
        let img = build_prompt(&caption("a", ModalityKind::Image, "A dog runs.")).unwrap();
        assert!(img.contains("ten pairs of instructions and responses"));
        assert!(img.starts_with("This is the caption of an image: A dog runs. This image contains"));
        assert!(!img.contains("video"));
        let vid = build_prompt(&caption("b", ModalityKind::Video, "A man cooks")).unwrap();
        assert!(vid.starts_with("This is the caption of a video: A man cooks. This video contains"));
        assert!(vid.contains("instruction related to the video"));
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(matches!(
            build_prompt(&caption("e", ModalityKind::Image, "  ")),
            Err(Error::EmptyCaption(_))
        ));
    }

    #[test]
    fn parse_canonical_form() {
        let pairs = parse_qa_pairs("Q: a\nA: b\n\nQ: c\nA: d").unwrap();
        assert_eq!(
            pairs,
            vec![("a".into(), "b".into()), ("c".into(), "d".into())]
        );
        assert!(matches!(parse_qa_pairs("no markers here"), Err(Error::NoPairsFound)));
    }

    #[test]
    fn parse_handles_noise() {
        let text = "Sure! Here are pairs:\n\nQ: orphan question\nsome chatter\nA: dangling\n\
                    Q:   spaced  \n\n\nA:  answer  \nQ: last\n";
        assert_eq!(
            parse_qa_pairs(text).unwrap(),
            vec![("spaced".into(), "answer".into())]
        );
    }

    #[test]
    fn parse_caps_at_ten_pairs() {
        for n in 1..=15 {
            let text: String = (0..n).map(|i| format!("Q: q{i}\nA: a{i}\n\n")).collect();
            let pairs = parse_qa_pairs(&text).unwrap();
            assert_eq!(pairs.len(), n.min(10));
            assert_eq!(pairs[0], ("q0".to_string(), "a0".to_string()));
        }
    }

    fn examples(source: Source, n: usize) -> Vec<InstructionExample> {
        (0..n)
            .map(|i| InstructionExample {
                id: format!("{source}-{i}"),
                source,
                media: vec![],
                instruction: "what is this".into(),
                response: "a thing".into(),
            })
            .collect()
    }

    #[test]
    fn mix_sizes_and_determinism() {
        let sources = vec![
            ("COCO", examples(Source::Coco, 30)),
            ("AVSD", examples(Source::Avsd, 20)),
        ];
        let a = mix(&sources, 20, 7).unwrap();
        assert_eq!(a.len(), 40);
        assert_eq!(a, mix(&sources, 20, 7).unwrap());
        let mut ids: Vec<&str> = a.iter().map(|e| e.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        assert!(matches!(
            mix(&sources, 21, 7),
            Err(Error::SourceTooSmall { available: 20, requested: 21, .. })
        ));
    }

    #[test]
    fn mix_full_sources_is_a_permutation() {
        let sources = vec![("custom", examples(Source::Custom, 9))];
        let mut mixed: Vec<String> = mix(&sources, 9, 1).unwrap().into_iter().map(|e| e.id).collect();
        mixed.sort();
        let mut all: Vec<String> = sources[0].1.iter().map(|e| e.id.clone()).collect();
        all.sort();
        assert_eq!(mixed, all);
    }

    #[test]
    fn stats_averages() {
        let mut ex = examples(Source::Coco, 2);
        ex[0].instruction = "one two three four".into();
        ex[1].instruction = "one two three four five six".into();
        let table = stats(&ex).unwrap();
        assert_eq!(table.rows[0].avg_instruction_words, 5.0);
        assert_eq!(table.rows[0].avg_response_words, 2.0);
        let text = table.to_string();
        assert!(text.lines().next().unwrap().contains("Ins. Len."));
        assert!(text.contains("5.0"));
        assert!(matches!(stats(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(69314), "69,314");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000000), "1,000,000");
    }

    struct Flaky {
        failures: Mutex<u32>,
    }

    impl GenerationClient for Flaky {
        fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse> {
            let mut f = self.failures.lock().unwrap();
            if *f > 0 {
                *f -= 1;
                return Err(Error::ClientError("busy".into()));
            }
            Ok(CompletionResponse {
                text: "Q: x\nA: y".into(),
            })
        }
    }

    #[test]
    fn retries_then_succeeds_or_gives_up() {
        let policy = RetryPolicy {
            max_retries: 2,
            backoff: Duration::ZERO,
            min_interval: Duration::ZERO,
        };
        let req = CompletionRequest {
            prompt: "p".into(),
            max_tokens: 1,
            temperature: 0.0,
        };
        let ok = RetryingClient::new(Flaky { failures: Mutex::new(2) }, policy.clone());
        assert!(ok.complete(&req).is_ok());
        let bad = RetryingClient::new(Flaky { failures: Mutex::new(3) }, policy);
        assert!(matches!(bad.complete(&req), Err(Error::ClientError(_))));
    }
}
