//! The full parameter set and the end-to-end forward path:
//! features → transform → align → assemble → decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{
    align_var, assemble_var, transform_var, InstructionSequence, SequenceLayout, TransformWeights,
};
use crate::cognitive::{Decoder, DecoderConfig};
use crate::encoders::{ModalityConfig, ModalityFeatures, ModalityKind};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::tokenizer::{Vocab, BOS, EOS, SEP};

/// Every trainable tensor: decoder weights, the shared embedding matrix, and
/// per-modality transform weights, all in one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub store: ParamStore,
    pub decoder: Decoder,
    /// Indexed in [`ModalityKind::ALL`] order.
    pub transforms: Vec<TransformWeights>,
    pub modality: ModalityConfig,
}

impl ModelParams {
    pub fn init(decoder: &DecoderConfig, modality: &ModalityConfig, seed: u64) -> Result<Self> {
        decoder.validate()?;
        modality.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = Decoder::register(&mut store, decoder, &mut rng)?;
        let transforms = ModalityKind::ALL
            .iter()
            .map(|&kind| {
                TransformWeights::register(
                    &mut store,
                    kind,
                    modality.spec(kind),
                    decoder.d_model,
                    decoder.alignment_heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            store,
            decoder: dec,
            transforms,
            modality: modality.clone(),
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.decoder.config
    }

    pub fn transform_for(&self, kind: ModalityKind) -> &TransformWeights {
        &self.transforms[kind.code() as usize]
    }

    /// The embedding matrix `E`.
    pub fn embedding(&self) -> &Tensor {
        self.store.get(self.decoder.embed)
    }

    /// Builds the input sequence on the tape.
    pub fn sequence_var(
        &self,
        tape: &mut Tape,
        ex: &EncodedExample,
    ) -> Result<(Var, SequenceLayout)> {
        let embed = tape.param(&self.store, self.decoder.embed);
        let mut soft = Vec::with_capacity(ex.features.len());
        for f in &ex.features {
            let w = self.transform_for(f.kind);
            let h = transform_var(tape, &self.store, f, w)?;
            soft.push((f.kind, align_var(tape, &self.store, h, embed, w)?));
        }
        assemble_var(
            tape,
            &soft,
            embed,
            &ex.instruction_ids,
            ex.response_ids.as_deref(),
        )
    }

    /// Next-token logits for every position, recorded on the tape.
    pub fn logits_var(&self, tape: &mut Tape, ex: &EncodedExample) -> Result<(Var, SequenceLayout)> {
        let (x, layout) = self.sequence_var(tape, ex)?;
        let logits = self.decoder.forward_var(tape, &self.store, x)?;
        Ok((logits, layout))
    }

    pub fn assemble(&self, ex: &EncodedExample) -> Result<InstructionSequence> {
        let mut tape = Tape::new();
        let (x, layout) = self.sequence_var(&mut tape, ex)?;
        Ok(InstructionSequence {
            embedded: tape.value(x).clone(),
            layout,
        })
    }

    pub fn forward(&self, ex: &EncodedExample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _) = self.logits_var(&mut tape, ex)?;
        Ok(tape.value(logits).clone())
    }

    /// Greedy continuation of the example's prefix (its response is ignored).
    pub fn generate(&self, ex: &EncodedExample, max_new: usize) -> Result<Vec<usize>> {
        let prefix = EncodedExample {
            response_ids: None,
            ..ex.clone()
        };
        let seq = self.assemble(&prefix)?;
        self.decoder.generate_greedy(&self.store, &seq, max_new)
    }
}

/// Model-ready example: ordered features plus framed token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    /// At most one entry per modality, in image, video, audio order.
    pub features: Vec<ModalityFeatures>,
    pub instruction_ids: Vec<usize>,
    pub response_ids: Option<Vec<usize>>,
}

impl EncodedExample {
    pub fn new(
        mut features: Vec<ModalityFeatures>,
        instruction_ids: Vec<usize>,
        response_ids: Option<Vec<usize>>,
    ) -> Result<Self> {
        features.sort_by_key(|f| f.kind);
        if features.windows(2).any(|w| w[0].kind == w[1].kind) {
            return Err(Error::InvalidData {
                location: "example".into(),
                message: "more than one media item of the same kind".into(),
            });
        }
        Ok(Self {
            features,
            instruction_ids,
            response_ids,
        })
    }

    /// Frames text as `[BOS] instruction [SEP]` and `response [EOS]`.
    pub fn from_text(
        vocab: &Vocab,
        features: Vec<ModalityFeatures>,
        instruction: &str,
        response: Option<&str>,
    ) -> Result<Self> {
        Self::new(
            features,
            frame_instruction(vocab, instruction)?,
            response.map(|r| frame_response(vocab, r)),
        )
    }
}

pub fn frame_instruction(vocab: &Vocab, text: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Err(Error::MissingText);
    }
    let mut ids = Vec::with_capacity(text.len() + 2);
    ids.push(BOS);
    ids.extend(vocab.encode(text));
    ids.push(SEP);
    Ok(ids)
}

pub fn frame_response(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.push(EOS);
    ids
}
