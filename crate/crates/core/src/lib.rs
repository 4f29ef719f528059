//! Multi-modal instruction tuning at desk scale.
//!
//! Image, video, and audio features are compressed to a fixed number of rows,
//! re-expressed as convex combinations of the language model's own token
//! embeddings, prepended to the embedded instruction, and fed to a small
//! causal decoder trained on the masked response likelihood. The
//! [`dataset`] module turns captions into instruction/response pairs through
//! a pluggable completion client.

pub mod alignment;
pub mod checkpoint;
pub mod cognitive;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod model;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use alignment::{align, assemble_prefix, attention, transform, InstructionSequence, SequenceLayout};
pub use checkpoint::Checkpoint;
pub use cognitive::{Decoder, DecoderConfig};
pub use config::{DataConfig, RunConfig};
pub use dataset::{build_prompt, parse_qa_pairs, CaptionRecord, InstructionExample};
pub use encoders::{ModalityConfig, ModalityFeatures, ModalityKind};
pub use error::{Error, Result};
pub use model::{EncodedExample, ModelParams};
pub use numerics::Tensor;
pub use tokenizer::Vocab;
pub use training::{evaluate, lr_at, EvalReport, StepMetrics, TrainConfig, Trainer};
