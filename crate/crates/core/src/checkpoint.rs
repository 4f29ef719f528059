//! Binary checkpoints (`MCWC`).
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "MCWC" | version u32
//! 4 × (u64 length | JSON): decoder config, modality config, train config, vocab
//! u32 count | count × tensor record                      -- parameters
//! u64 adam_t | u32 count | count × tensor record         -- first then second moments
//! u64 step
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//!
//! tensor record: u32 name length | name bytes | u32 rank | rank × u64 dim | f64 values
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::cognitive::DecoderConfig;
use crate::encoders::ModalityConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{ParamId, Tensor};
use crate::tokenizer::Vocab;
use crate::training::{AdamState, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCWC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub trainer: Trainer,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl Checkpoint {
    pub fn new(vocab: Vocab, trainer: Trainer) -> Self {
        Self { vocab, trainer }
    }

    pub fn params(&self) -> &ModelParams {
        &self.trainer.params
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.trainer;
        let store = &t.params.store;
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        write_json(&mut w, t.params.config());
        write_json(&mut w, &t.params.modality);
        write_json(&mut w, &t.config);
        write_json(&mut w, &self.vocab);

        w.extend_from_slice(&(store.len() as u32).to_le_bytes());
        for (_, name, tensor) in store.iter() {
            write_tensor(&mut w, name, tensor);
        }

        w.extend_from_slice(&t.optimizer.t.to_le_bytes());
        w.extend_from_slice(&(2 * store.len() as u32).to_le_bytes());
        for (prefix, moments) in [("m", &t.optimizer.m), ("v", &t.optimizer.v)] {
            for (id, name, _) in store.iter() {
                write_tensor(&mut w, &format!("{prefix}.{name}"), &moments[id.0]);
            }
        }

        w.extend_from_slice(&t.step.to_le_bytes());
        let rng = RngState::capture(&t.rng);
        w.extend_from_slice(&rng.seed);
        w.extend_from_slice(&rng.stream.to_le_bytes());
        w.extend_from_slice(&rng.word_pos.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let decoder: DecoderConfig = r.json()?;
        let modality: ModalityConfig = r.json()?;
        let train: TrainConfig = r.json()?;
        let vocab: Vocab = r.json()?;

        let mut params = ModelParams::init(&decoder, &modality, 0)
            .map_err(|e| Error::CorruptPayload(format!("stored config is invalid: {e}")))?;
        let count = r.u32()? as usize;
        if count != params.store.len() {
            return Err(Error::CorruptPayload(format!(
                "{count} parameter tensors, config implies {}",
                params.store.len()
            )));
        }
        for i in 0..count {
            let expected = params.store.name(ParamId(i)).to_string();
            let t = r.tensor(&expected, params.store.get(ParamId(i)).shape())?;
            *params.store.get_mut(ParamId(i)) = t;
        }

        let mut optimizer = AdamState::new(&params);
        optimizer.t = r.u64()?;
        let moments = r.u32()? as usize;
        if moments != 2 * count {
            return Err(Error::CorruptPayload(format!(
                "{moments} optimizer tensors, expected {}",
                2 * count
            )));
        }
        for (prefix, slot) in [("m", &mut optimizer.m), ("v", &mut optimizer.v)] {
            for i in 0..count {
                let name = format!("{prefix}.{}", params.store.name(ParamId(i)));
                slot[i] = r.tensor(&name, params.store.get(ParamId(i)).shape())?;
            }
        }

        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(Error::CorruptPayload(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut trainer = Trainer::new(params, train)
            .map_err(|e| Error::CorruptPayload(format!("stored train config is invalid: {e}")))?;
        trainer.optimizer = optimizer;
        trainer.step = step;
        trainer.rng = RngState {
            seed,
            stream,
            word_pos,
        }
        .restore();
        Ok(Self { vocab, trainer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_json<T: Serialize>(w: &mut Vec<u8>, value: &T) {
    let json = serde_json::to_vec(value).expect("config serializes");
    w.extend_from_slice(&(json.len() as u64).to_le_bytes());
    w.extend_from_slice(&json);
}

fn write_tensor(w: &mut Vec<u8>, name: &str, t: &Tensor) {
    w.extend_from_slice(&(name.len() as u32).to_le_bytes());
    w.extend_from_slice(name.as_bytes());
    w.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        w.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptPayload(format!(
                    "unexpected end of data at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn json<T: DeserializeOwned>(&mut self) -> Result<T> {
        let len = self.u64()? as usize;
        let raw = self.take(len)?;
        serde_json::from_slice(raw).map_err(|e| Error::CorruptPayload(format!("config: {e}")))
    }

    fn tensor(&mut self, expected_name: &str, expected_shape: &[usize]) -> Result<Tensor> {
        let name_len = self.u32()? as usize;
        let name = self.take(name_len)?;
        if name != expected_name.as_bytes() {
            return Err(Error::CorruptPayload(format!(
                "expected tensor `{expected_name}`, found `{}`",
                String::from_utf8_lossy(name)
            )));
        }
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        if shape != expected_shape {
            return Err(Error::CorruptPayload(format!(
                "tensor `{expected_name}` has shape {shape:?}, expected {expected_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}
