//! Python bindings for `bcpred`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use bcpred::corpus::{self, BcCategory, ContinuerLexicon, ListenerRegistry};
use bcpred::dsp::{self, FrameSpec, Waveform};
use bcpred::model::{checkpoint, predict as argmax_class, Example, Model};
use bcpred::nn;
use bcpred::synthetic::{self, SyntheticSpec};
use bcpred::textfeat;
use bcpred::train::EvalReport;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &dsp::FeatureMatrix) -> Vec<Vec<f32>> {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn frame_spec(frame_len_ms: u32, shift_ms: u32) -> FrameSpec {
    FrameSpec { frame_len_ms, shift_ms }
}

/// Class label of a backchannel realization: "Continuer" or "Assessment".
#[pyfunction]
#[pyo3(signature = (tokens, lexicon=None))]
fn classify_realization(tokens: Vec<String>, lexicon: Option<PathBuf>) -> PyResult<&'static str> {
    let lex = match lexicon {
        Some(p) => ContinuerLexicon::load(&p).map_err(value_err)?,
        None => ContinuerLexicon::default(),
    };
    Ok(corpus::classify_realization(&tokens, &lex).map_err(value_err)?.label())
}

#[pyfunction]
fn normalize_token(token: &str) -> String {
    corpus::normalize_token(token)
}

#[pyfunction]
#[pyo3(signature = (window_ms, frame_len_ms=25, shift_ms=10))]
fn frame_count(window_ms: u64, frame_len_ms: u32, shift_ms: u32) -> PyResult<usize> {
    dsp::frame_count(window_ms, &frame_spec(frame_len_ms, shift_ms)).map_err(value_err)
}

/// Frames × 13 MFCC matrix as a list of rows.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, frame_len_ms=25, shift_ms=10))]
fn mfcc(samples: Vec<f32>, sample_rate_hz: u32, frame_len_ms: u32, shift_ms: u32) -> PyResult<Vec<Vec<f32>>> {
    let wave = Waveform::new(samples, sample_rate_hz).map_err(value_err)?;
    Ok(rows(&dsp::mfcc(&wave, &frame_spec(frame_len_ms, shift_ms)).map_err(value_err)?))
}

/// Frames × [F0 Hz, loudness, voicing] as a list of rows.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate_hz, frame_len_ms=25, shift_ms=10))]
fn prosodic(samples: Vec<f32>, sample_rate_hz: u32, frame_len_ms: u32, shift_ms: u32) -> PyResult<Vec<Vec<f32>>> {
    let wave = Waveform::new(samples, sample_rate_hz).map_err(value_err)?;
    Ok(rows(&dsp::prosodic(&wave, &frame_spec(frame_len_ms, shift_ms)).map_err(value_err)?))
}

/// Returns (samples, sample_rate_hz).
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let wave = dsp::read_wav(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok((wave.samples().to_vec(), wave.sample_rate_hz()))
}

/// Valid cross-correlation of a `len × height` input with a `width × height` filter.
#[pyfunction]
fn conv_full_height(input: Vec<f64>, height: usize, filter: Vec<f64>, bias: f64) -> PyResult<Vec<f64>> {
    nn::conv_full_height(&input, height, &filter, bias).map_err(value_err)
}

/// Returns (probabilities, cross-entropy loss).
#[pyfunction]
fn softmax_xent(logits: Vec<f64>, target: usize) -> PyResult<(Vec<f64>, f64)> {
    if target >= logits.len() {
        return Err(PyValueError::new_err("target out of range"));
    }
    Ok(nn::softmax_xent(&logits, target))
}

/// Accuracy, confusion matrix and per-class metrics from class indices.
#[pyfunction]
fn eval_report(truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<String> {
    if truth.len() != predicted.len() {
        return Err(PyValueError::new_err("truth and predicted differ in length"));
    }
    let to_class = |v: Vec<usize>| {
        v.into_iter()
            .map(|i| BcCategory::from_index(i).ok_or_else(|| PyValueError::new_err(format!("class index {i}"))))
            .collect::<PyResult<Vec<_>>>()
    };
    let report = EvalReport::from_predictions(&to_class(truth)?, &to_class(predicted)?);
    serde_json::to_string(&report).map_err(value_err)
}

/// Writes the synthetic fixture corpus; returns its class counts.
#[pyfunction]
#[pyo3(signature = (out, conversations=30, seed=7))]
fn generate_synthetic(out: PathBuf, conversations: usize, seed: u64) -> PyResult<[usize; 3]> {
    let spec = SyntheticSpec { conversations, seed, ..Default::default() };
    let summary = synthetic::generate(&out, &spec).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(summary.class_counts)
}

/// Runs the command line with the given arguments (without the program
/// name) and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    bcpred::cli::run(std::iter::once("bcpred".to_string()).chain(args))
}

#[pyclass(name = "EmbeddingTable")]
struct PyEmbeddingTable {
    inner: textfeat::EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    #[new]
    #[pyo3(signature = (path, unk_seed=1234))]
    fn new(path: PathBuf, unk_seed: u64) -> PyResult<Self> {
        let inner = textfeat::EmbeddingTable::load(&path, unk_seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn lookup(&self, token: &str) -> Vec<f32> {
        self.inner.lookup(token).to_vec()
    }

    /// Flattened `n × dim` grid of the last `n` tokens, zero-padded on the left.
    fn grid(&self, tokens: Vec<String>, n: usize) -> Vec<f32> {
        textfeat::build_grid(&tokens, &self.inner, n).data
    }
}

#[pyclass]
struct Predictor {
    model: Model<f32>,
    metadata: BTreeMap<String, String>,
    listeners: Option<ListenerRegistry>,
}

#[pymethods]
impl Predictor {
    #[new]
    fn new(checkpoint_path: PathBuf) -> PyResult<Self> {
        let ck = checkpoint::load(&checkpoint_path).map_err(value_err)?;
        let listeners = match ck.metadata.get("listeners") {
            Some(text) => Some(serde_json::from_str(text).map_err(value_err)?),
            None => None,
        };
        Ok(Self { model: ck.model, metadata: ck.metadata, listeners })
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model.config).map_err(value_err)
    }

    #[getter]
    fn metadata(&self) -> BTreeMap<String, String> {
        self.metadata.clone()
    }

    #[getter]
    fn unknown_listener(&self) -> usize {
        self.model.config.listener.count
    }

    /// Listener id for a `conversation:channel` key, if registered.
    fn listener_id(&self, key: &str) -> Option<usize> {
        self.listeners.as_ref().and_then(|r| r.get_key(key))
    }

    /// Class probabilities for a flattened lexical grid and acoustic matrix.
    fn predict_proba(&self, grid: Vec<f32>, acoustic: Vec<f32>, listener: usize) -> PyResult<Vec<f32>> {
        let ex = Example { grid: &grid, acoustic: &acoustic, listener };
        self.model.predict_proba(&ex).map_err(value_err)
    }

    fn predict(&self, grid: Vec<f32>, acoustic: Vec<f32>, listener: usize) -> PyResult<&'static str> {
        Ok(argmax_class(&self.predict_proba(grid, acoustic, listener)?).label())
    }
}

#[pymodule]
fn bcpred_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(classify_realization, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_token, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(prosodic, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(conv_full_height, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_xent, m)?)?;
    m.add_function(wrap_pyfunction!(eval_report, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<Predictor>()?;
    Ok(())
}
