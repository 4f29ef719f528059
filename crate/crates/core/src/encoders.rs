//! Modality feature producers.
//!
//! Real vision/audio backbones are not bundled. Features come either from a
//! deterministic stub seeded by the media fingerprint or from a precomputed
//! feature file (`MCWF`), which is how externally extracted features enter.

use std::fmt;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"MCWF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4;
pub const FEATURE_EXTENSION: &str = "mcwf";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Image,
    Video,
    Audio,
}

impl ModalityKind {
    /// Prefix order: image, video, audio.
    pub const ALL: [ModalityKind; 3] = [Self::Image, Self::Video, Self::Audio];

    pub fn code(self) -> u8 {
        match self {
            Self::Image => 0,
            Self::Video => 1,
            Self::Audio => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Self::Image),
            1 => Ok(Self::Video),
            2 => Ok(Self::Audio),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Image => "image",
            Self::Video => "video",
            Self::Audio => "audio",
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Self::Image),
            "video" => Ok(Self::Video),
            "audio" => Ok(Self::Audio),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

/// Per-modality feature geometry. For video, `length` is the frame budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    /// Feature rows produced by the encoder (`L`).
    pub length: usize,
    /// Feature width (`d_h`).
    pub dim: usize,
    /// Rows after the length-compressing transform (`L'`).
    pub out_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModalityConfig {
    pub image: ModalitySpec,
    pub video: ModalitySpec,
    pub audio: ModalitySpec,
    /// Patch rows mean-pooled into each stub video frame.
    pub frame_patches: usize,
    /// Frame count assumed for videos whose length is unknown.
    pub default_video_frames: usize,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        Self {
            image: ModalitySpec {
                length: 16,
                dim: 32,
                out_len: 4,
            },
            video: ModalitySpec {
                length: 8,
                dim: 32,
                out_len: 4,
            },
            audio: ModalitySpec {
                length: 24,
                dim: 24,
                out_len: 4,
            },
            frame_patches: 16,
            default_video_frames: 32,
        }
    }
}

impl ModalityConfig {
    pub fn spec(&self, kind: ModalityKind) -> &ModalitySpec {
        match kind {
            ModalityKind::Image => &self.image,
            ModalityKind::Video => &self.video,
            ModalityKind::Audio => &self.audio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ModalityKind::ALL {
            let s = self.spec(kind);
            let at = |field: &str| format!("modality.{kind}.{field}");
            if s.length == 0 {
                return Err(Error::config(at("length"), "must be positive"));
            }
            if s.dim == 0 {
                return Err(Error::config(at("dim"), "must be positive"));
            }
            if s.out_len == 0 || s.out_len > s.length {
                return Err(Error::config(
                    at("out_len"),
                    format!("must be in 1..={}", s.length),
                ));
            }
        }
        if self.frame_patches == 0 {
            return Err(Error::config("modality.frame_patches", "must be positive"));
        }
        if self.default_video_frames == 0 {
            return Err(Error::config("modality.default_video_frames", "must be positive"));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a of a byte string.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// A reference to one piece of media.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MediaRef {
    pub kind: ModalityKind,
    pub path: Option<PathBuf>,
    pub fingerprint: u64,
    /// Known frame count for video.
    pub frame_count: Option<usize>,
}

impl MediaRef {
    pub fn from_bytes(kind: ModalityKind, bytes: &[u8]) -> Self {
        Self {
            kind,
            path: None,
            fingerprint: fingerprint(bytes),
            frame_count: None,
        }
    }

    pub fn with_frame_count(mut self, frames: usize) -> Self {
        self.frame_count = Some(frames);
        self
    }

    /// Resolves a media path. Existing files are fingerprinted by content;
    /// paths that do not exist on disk are fingerprinted by the path string
    /// so datasets stay usable without the media itself.
    pub fn resolve(kind: ModalityKind, path: &str, root: Option<&Path>) -> Result<Self> {
        let full = match root {
            Some(r) => r.join(path),
            None => PathBuf::from(path),
        };
        let fingerprint = if full.is_file() {
            let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
            fingerprint(&bytes)
        } else {
            fingerprint(path.as_bytes())
        };
        Ok(Self {
            kind,
            path: Some(full),
            fingerprint,
            frame_count: None,
        })
    }

    fn is_feature_file(&self) -> bool {
        self.path
            .as_deref()
            .and_then(Path::extension)
            .is_some_and(|e| e == FEATURE_EXTENSION)
    }
}

/// Encoder output: an `L×d_h` matrix tagged with its modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub kind: ModalityKind,
    pub matrix: Tensor,
}

impl ModalityFeatures {
    pub fn new(kind: ModalityKind, matrix: Tensor) -> Result<Self> {
        if !matrix.is_matrix() {
            return Err(Error::shape("features", format!("{:?}", matrix.shape())));
        }
        if !matrix.all_finite() {
            return Err(Error::InvalidData {
                location: format!("{kind} features"),
                message: "non-finite value".into(),
            });
        }
        Ok(Self { kind, matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn check_shape(&self, cfg: &ModalityConfig) -> Result<()> {
        let s = cfg.spec(self.kind);
        if self.len() != s.length || self.dim() != s.dim {
            return Err(Error::shape(
                "features",
                format!(
                    "{} features are {}x{}, config expects {}x{}",
                    self.kind,
                    self.len(),
                    self.dim(),
                    s.length,
                    s.dim
                ),
            ));
        }
        Ok(())
    }
}

fn uniform_matrix(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("stub shape")
}

fn kind_seed(fp: u64, kind: ModalityKind) -> u64 {
    let mut h = FnvHasher::default();
    h.write_u64(fp);
    h.write_u8(kind.code());
    h.finish()
}

/// Deterministic stand-in for a pretrained encoder: values uniform in
/// `[-1, 1]` drawn from a generator seeded by the fingerprint.
pub fn stub_encode(media: &MediaRef, cfg: &ModalityConfig) -> Result<ModalityFeatures> {
    if media.kind == ModalityKind::Video {
        return encode_video(media, cfg);
    }
    let s = cfg.spec(media.kind);
    ModalityFeatures::new(
        media.kind,
        uniform_matrix(kind_seed(media.fingerprint, media.kind), s.length, s.dim),
    )
}

/// `indices[j] = floor(j·N / F)` for `j < F`.
pub fn sample_frames(frame_count: usize, target: usize) -> Vec<usize> {
    assert!(frame_count >= 1 && target >= 1, "frame counts must be positive");
    (0..target).map(|j| j * frame_count / target).collect()
}

/// Stub encoding of one frame, mean-pooled over its patch rows.
pub fn encode_frame(media: &MediaRef, frame: usize, cfg: &ModalityConfig) -> Vec<f64> {
    let mut h = FnvHasher::default();
    h.write_u64(kind_seed(media.fingerprint, ModalityKind::Video));
    h.write_u64(frame as u64);
    let dim = cfg.video.dim;
    let patches = uniform_matrix(h.finish(), cfg.frame_patches, dim);
    let mut pooled = vec![0.0; dim];
    for i in 0..patches.rows() {
        for (p, x) in pooled.iter_mut().zip(patches.row(i)) {
            *p += x;
        }
    }
    pooled
        .iter_mut()
        .for_each(|p| *p /= cfg.frame_patches as f64);
    pooled
}

/// Samples `F` frames and stacks one pooled row per frame into `F×d_h`.
pub fn encode_video(media: &MediaRef, cfg: &ModalityConfig) -> Result<ModalityFeatures> {
    let frames = media.frame_count.unwrap_or(cfg.default_video_frames);
    let rows: Vec<Vec<f64>> = sample_frames(frames, cfg.video.length)
        .into_iter()
        .map(|f| encode_frame(media, f, cfg))
        .collect();
    ModalityFeatures::new(ModalityKind::Video, Tensor::from_rows(&rows)?)
}

/// Features for a media reference: feature files are loaded and checked
/// against the config, anything else goes through the stub encoder.
pub fn resolve_features(media: &MediaRef, cfg: &ModalityConfig) -> Result<ModalityFeatures> {
    if media.is_feature_file() {
        let path = media.path.as_deref().expect("feature file has a path");
        let f = load_features(path)?;
        if f.kind != media.kind {
            return Err(Error::InvalidData {
                location: path.display().to_string(),
                message: format!("file holds {} features, expected {}", f.kind, media.kind),
            });
        }
        f.check_shape(cfg)?;
        Ok(f)
    } else {
        stub_encode(media, cfg)
    }
}

/// Serializes features: magic, version, kind, rows, cols, then `f32` LE
/// values in row-major order.
pub fn features_to_bytes(f: &ModalityFeatures) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * f.matrix.len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.push(f.kind.code());
    out.extend_from_slice(&(f.len() as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    for &x in f.matrix.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn features_from_bytes(bytes: &[u8]) -> Result<ModalityFeatures> {
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::TruncatedFile(format!(
            "header needs {FEATURE_HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            expected: FEATURE_VERSION,
            found: version,
        });
    }
    let kind = ModalityKind::from_code(bytes[8])?;
    let (rows, cols) = (u32_at(9) as usize, u32_at(13) as usize);
    let count = rows * cols;
    let payload = &bytes[FEATURE_HEADER_LEN..];
    if payload.len() < 4 * count {
        return Err(Error::TruncatedFile(format!(
            "header declares {rows}x{cols} = {count} values, found {}",
            payload.len() / 4
        )));
    }
    if payload.len() > 4 * count {
        return Err(Error::InvalidData {
            location: "feature file".into(),
            message: format!("{} trailing bytes", payload.len() - 4 * count),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    ModalityFeatures::new(kind, Tensor::new(vec![rows, cols], data)?)
}

pub fn write_features(path: &Path, f: &ModalityFeatures) -> Result<()> {
    std::fs::write(path, features_to_bytes(f)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<ModalityFeatures> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    features_from_bytes(&bytes)
}
