//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use macaw_core::checkpoint::Checkpoint;
use macaw_core::dataset::{self, CaptionRecord, MediaEntry, Source};
use macaw_core::encoders::{self, MediaRef};
use macaw_core::numerics::{ops, Tensor};
use macaw_core::{alignment, training, EncodedExample, ModalityKind, TrainConfig, Vocab};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Rows = Vec<Vec<f64>>;

fn err(e: macaw_core::Error) -> PyErr {
    match e {
        macaw_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: &Rows) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(err)
}

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn kind(name: &str) -> PyResult<ModalityKind> {
    name.parse().map_err(err)
}

/// Scaled dot-product attention `softmax(QKᵀ/√d)V`.
#[pyfunction]
fn attention(q: Rows, k: Rows, v: Rows) -> PyResult<Rows> {
    let out = alignment::attention(&matrix(&q)?, &matrix(&k)?, &matrix(&v)?).map_err(err)?;
    Ok(rows(&out))
}

/// Row-wise softmax.
#[pyfunction]
fn softmax(x: Rows) -> PyResult<Rows> {
    Ok(rows(&ops::softmax_rows(&matrix(&x)?).map_err(err)?))
}

/// Valid 1-D convolution. `w` is nested `k × d_in × d_out`.
#[pyfunction]
#[pyo3(signature = (x, w, bias, stride=1))]
fn conv1d(x: Rows, w: Vec<Rows>, bias: Vec<f64>, stride: usize) -> PyResult<Rows> {
    let k = w.len();
    let d_in = w.first().map_or(0, Vec::len);
    let d_out = w.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let flat: Vec<f64> = w.into_iter().flatten().flatten().collect();
    let w = Tensor::new(vec![k, d_in, d_out], flat).map_err(err)?;
    let out = ops::conv1d(&matrix(&x)?, &w, &Tensor::vector(bias), stride).map_err(err)?;
    Ok(rows(&out))
}

#[pyfunction]
fn encode(text: &str) -> Vec<usize> {
    Vocab::default().encode(text)
}

#[pyfunction]
fn decode(ids: Vec<usize>) -> PyResult<String> {
    Vocab::default().decode(&ids).map_err(err)
}

/// Indices of `target` frames spread evenly over a clip.
#[pyfunction]
fn sample_frames(frame_count: usize, target: usize) -> Vec<usize> {
    encoders::sample_frames(frame_count, target)
}

/// Deterministic stub features for `kind` keyed by `tag`, at default sizes.
#[pyfunction]
fn stub_features(kind_name: &str, tag: &str) -> PyResult<Rows> {
    let media = MediaRef::from_bytes(kind(kind_name)?, tag.as_bytes());
    let f = encoders::stub_encode(&media, &Default::default()).map_err(err)?;
    Ok(rows(&f.matrix))
}

/// Generation prompt for a caption; `kinds` names the attached media.
#[pyfunction]
#[pyo3(signature = (caption, kinds=vec!["image".to_string()]))]
fn build_prompt(caption: String, kinds: Vec<String>) -> PyResult<String> {
    let media = kinds
        .iter()
        .map(|k| Ok(MediaEntry { kind: kind(k)?, path: String::new() }))
        .collect::<PyResult<_>>()?;
    let rec = CaptionRecord { id: "py".into(), media, caption, source: Source::Custom };
    dataset::build_prompt(&rec).map_err(err)
}

#[pyfunction]
fn parse_qa_pairs(completion: &str) -> PyResult<Vec<(String, String)>> {
    dataset::parse_qa_pairs(completion).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (step, total_steps, learning_rate=3e-5, warmup_ratio=0.03))]
fn lr_at(step: usize, total_steps: usize, learning_rate: f64, warmup_ratio: f64) -> f64 {
    let cfg = TrainConfig { learning_rate, warmup_ratio, ..TrainConfig::default() };
    training::lr_at(step, total_steps, &cfg)
}

/// A trained model loaded from an MCWC checkpoint.
#[pyclass(frozen)]
struct Model {
    ck: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { ck: Checkpoint::load(&path).map_err(err)? })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.ck.trainer.step
    }

    /// Response NLL and perplexity over an instruction JSONL file.
    #[pyo3(signature = (path, media_root=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        path: PathBuf,
        media_root: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let params = self.ck.params();
        let raw = dataset::load_examples(&path).map_err(err)?;
        let data =
            dataset::encode_examples(&self.ck.vocab, &raw, &params.modality, media_root.as_deref())
                .map_err(err)?;
        let r = training::evaluate(params, &data).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("examples", r.examples)?;
        d.set_item("tokens", r.tokens)?;
        d.set_item("mean_nll", r.mean_nll)?;
        d.set_item("perplexity", r.perplexity)?;
        Ok(d)
    }

    /// Greedy response to `instruction` given `(kind, path)` media pairs.
    #[pyo3(signature = (instruction, media=vec![], max_new=64))]
    fn generate(&self, instruction: &str, media: Vec<(String, String)>, max_new: usize) -> PyResult<String> {
        let params = self.ck.params();
        let features = media
            .iter()
            .map(|(k, p)| {
                let m = MediaRef::resolve(kind(k)?, p, None).map_err(err)?;
                encoders::resolve_features(&m, &params.modality).map_err(err)
            })
            .collect::<PyResult<Vec<_>>>()?;
        let ex = EncodedExample::from_text(&self.ck.vocab, features, instruction, None).map_err(err)?;
        let ids = params.generate(&ex, max_new).map_err(err)?;
        Ok(self.ck.vocab.decode_lossy(&ids))
    }
}

#[pymodule]
fn macaw(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(attention, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(conv1d, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(sample_frames, m)?)?;
    m.add_function(wrap_pyfunction!(stub_features, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_qa_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
