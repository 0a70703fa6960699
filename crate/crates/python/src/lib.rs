//! Python bindings: models, noise recovery and replay, baselines, metrics,
//! the synthetic testbed, and sweeps.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use cfdecode::baselines::{greedy_decode, sample_decode, vocab_bias_decode, STAGE_DECODE};
use cfdecode::harness::trace::{decode_trace, encode_trace};
use cfdecode::harness::{encode_prompt, encode_reference, run_sweep, ExperimentConfig, ModelProvider, ModelSource};
use cfdecode::hindsight::{
    beta_hindsight, recover_noise, replay, DecodeParams, NoiseTrace, RecordSeeds, TraceProvenance, STAGE_RECOVER,
    STAGE_REPLAY_CONTINUATION,
};
use cfdecode::model::{LanguageModel, NGramModel, TokenId};
use cfdecode::testbed::{build_testbed, rule_score, TestbedSpec, Thresholds};
use cfdecode::{metrics, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::Connection(_) | Error::Model(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// An autoregressive model: toy n-gram, testbed, or logit server.
#[pyclass(frozen)]
struct Model {
    inner: Arc<dyn LanguageModel>,
    scorer: Option<Thresholds>,
}

#[pymethods]
impl Model {
    /// Train a byte-level n-gram model; documents are the corpus lines.
    #[staticmethod]
    #[pyo3(signature = (corpus, order = 3, smoothing = 0.1))]
    fn train_ngram(corpus: &str, order: usize, smoothing: f64) -> PyResult<Self> {
        let m = NGramModel::train(corpus, order, smoothing).map_err(to_py)?;
        Ok(Self {
            inner: Arc::new(m),
            scorer: None,
        })
    }

    /// Open `toy:PATH`, `testbed:DIR`, `tcp:HOST:PORT` or `cmd:PROGRAM ARGS`.
    #[staticmethod]
    fn open(source: &str) -> PyResult<Self> {
        let source: ModelSource = source.parse().map_err(to_py)?;
        let provider = ModelProvider::open(&source).map_err(to_py)?;
        Ok(Self {
            scorer: provider.scorer().cloned(),
            inner: provider.connect().map_err(to_py)?,
        })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().size()
    }

    #[getter]
    fn bos(&self) -> TokenId {
        self.inner.vocab().bos()
    }

    #[getter]
    fn eos(&self) -> TokenId {
        self.inner.vocab().eos()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_hex()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.inner.vocab().encode(text).map_err(to_py)
    }

    fn decode(&self, tokens: Vec<TokenId>) -> String {
        self.inner.vocab().decode(&tokens)
    }

    /// Prompt tokens for `text`, ending with bos.
    fn prompt_tokens(&self, text: &str) -> PyResult<Vec<TokenId>> {
        encode_prompt(self.inner.vocab(), text, None).map_err(to_py)
    }

    /// Reference tokens for `text`, ending with eos.
    fn reference_tokens(&self, text: &str) -> PyResult<Vec<TokenId>> {
        encode_reference(self.inner.vocab(), text).map_err(to_py)
    }

    fn next_logits(&self, context: Vec<TokenId>) -> PyResult<Vec<f64>> {
        self.inner.next_logits(&context).map_err(to_py)
    }

    /// Ordinal score of `text` under the bundled testbed scorer, if any.
    fn score(&self, text: &str) -> Option<u32> {
        self.scorer.as_ref().map(|t| rule_score(text, t).value())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(vocab_size={}, fingerprint='{}')",
            self.inner.vocab().size(),
            self.inner.fingerprint()
        )
    }
}

/// Recovered per-step Gumbel noise for a reference sequence.
#[pyclass(frozen)]
struct Trace {
    inner: NoiseTrace,
}

#[pymethods]
impl Trace {
    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn reference(&self) -> Vec<TokenId> {
        self.inner.reference.clone()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.model_fingerprint.to_hex()
    }

    /// Noise as a list of per-step rows.
    #[getter]
    fn noise(&self) -> Vec<Vec<f64>> {
        (0..self.inner.num_steps()).map(|t| self.inner.step(t).to_vec()).collect()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &encode_trace(&self.inner).map_err(to_py)?))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: decode_trace(data).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        cfdecode::harness::write_trace(&self.inner, path).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: cfdecode::harness::read_trace(path).map_err(to_py)?,
        })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner.bitwise_eq(&other.inner)
    }
}

fn params(beta: f64, max_len: usize) -> DecodeParams {
    DecodeParams {
        beta,
        max_len,
        include_reference_in_prompt: false,
    }
}

/// Recover noise that makes `model` emit `reference` (eos-terminated) after `prompt`.
#[pyfunction]
#[pyo3(signature = (model, prompt, reference, seed = 0, record_id = "py"))]
fn recover(model: &Model, prompt: Vec<TokenId>, reference: Vec<TokenId>, seed: u64, record_id: &str) -> PyResult<Trace> {
    let seeds = RecordSeeds::new(seed, record_id);
    let mut trace = recover_noise(model.inner.as_ref(), &prompt, &reference, &mut seeds.stream(STAGE_RECOVER))
        .map_err(to_py)?;
    trace.provenance = Some(TraceProvenance {
        global_seed: seed,
        record_id: record_id.to_string(),
    });
    Ok(Trace { inner: trace })
}

/// Decode under `intervened_prompt` steered by `beta` times the trace noise.
/// Returns `(tokens, truncated)`.
#[pyfunction(name = "replay")]
#[pyo3(signature = (model, intervened_prompt, trace, beta = 1.0, max_len = 512, seed = 0, record_id = "py"))]
fn replay_py(
    model: &Model,
    intervened_prompt: Vec<TokenId>,
    trace: &Trace,
    beta: f64,
    max_len: usize,
    seed: u64,
    record_id: &str,
) -> PyResult<(Vec<TokenId>, bool)> {
    let seeds = match &trace.inner.provenance {
        Some(p) => RecordSeeds::new(p.global_seed, p.record_id.clone()),
        None => RecordSeeds::new(seed, record_id),
    };
    let d = replay(
        model.inner.as_ref(),
        &intervened_prompt,
        &trace.inner,
        &params(beta, max_len),
        &mut seeds.stream(STAGE_REPLAY_CONTINUATION),
    )
    .map_err(to_py)?;
    Ok((d.tokens, d.truncated))
}

/// Text-level recover-then-replay. Returns the output text.
#[pyfunction]
#[pyo3(signature = (model, prompt, reference, intervened_prompt, beta = 1.0, max_len = 512, seed = 0, record_id = "py"))]
#[allow(clippy::too_many_arguments)]
fn counterfactual(
    model: &Model,
    prompt: &str,
    reference: &str,
    intervened_prompt: &str,
    beta: f64,
    max_len: usize,
    seed: u64,
    record_id: &str,
) -> PyResult<String> {
    let m = model.inner.as_ref();
    let vocab = m.vocab();
    let prompt = encode_prompt(vocab, prompt, None).map_err(to_py)?;
    let reference = encode_reference(vocab, reference).map_err(to_py)?;
    let intervened = encode_prompt(vocab, intervened_prompt, None).map_err(to_py)?;
    let g = beta_hindsight(
        m,
        &prompt,
        &reference,
        &intervened,
        &params(beta, max_len),
        &RecordSeeds::new(seed, record_id),
    )
    .map_err(to_py)?;
    Ok(vocab.decode(&g.output))
}

/// Fresh-noise sampling at `temperature`. Returns `(tokens, truncated)`.
#[pyfunction]
#[pyo3(signature = (model, prompt, temperature = 1.0, max_len = 512, seed = 0, record_id = "py"))]
fn sample(
    model: &Model,
    prompt: Vec<TokenId>,
    temperature: f64,
    max_len: usize,
    seed: u64,
    record_id: &str,
) -> PyResult<(Vec<TokenId>, bool)> {
    let mut s = RecordSeeds::new(seed, record_id).stream(STAGE_DECODE);
    let d = sample_decode(model.inner.as_ref(), &prompt, temperature, &params(1.0, max_len), &mut s)
        .map_err(to_py)?;
    Ok((d.tokens, d.truncated))
}

/// Unperturbed argmax decoding. Returns `(tokens, truncated)`.
#[pyfunction]
#[pyo3(signature = (model, prompt, max_len = 512))]
fn greedy(model: &Model, prompt: Vec<TokenId>, max_len: usize) -> PyResult<(Vec<TokenId>, bool)> {
    let d = greedy_decode(model.inner.as_ref(), &prompt, &params(1.0, max_len)).map_err(to_py)?;
    Ok((d.tokens, d.truncated))
}

/// Sampling with `alpha` added to every reference token's logit.
#[pyfunction]
#[pyo3(signature = (model, prompt, reference, alpha, max_len = 512, seed = 0, record_id = "py"))]
fn vocab_bias(
    model: &Model,
    prompt: Vec<TokenId>,
    reference: Vec<TokenId>,
    alpha: f64,
    max_len: usize,
    seed: u64,
    record_id: &str,
) -> PyResult<(Vec<TokenId>, bool)> {
    let mut s = RecordSeeds::new(seed, record_id).stream(STAGE_DECODE);
    let d = vocab_bias_decode(model.inner.as_ref(), &prompt, &reference, alpha, &params(1.0, max_len), &mut s)
        .map_err(to_py)?;
    Ok((d.tokens, d.truncated))
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

#[pyfunction]
fn similarity(reference: &str, output: &str) -> f64 {
    metrics::similarity(reference, output)
}

#[pyfunction]
fn qwk(predicted: Vec<u32>, gold: Vec<u32>, k: u32) -> PyResult<f64> {
    metrics::qwk(&predicted, &gold, k).map_err(to_py)
}

/// Build the synthetic testbed into `out_dir`; returns the record count.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, transitions_cap = None))]
fn make_testbed(out_dir: PathBuf, seed: u64, transitions_cap: Option<usize>) -> PyResult<usize> {
    let mut spec = TestbedSpec {
        seed,
        ..TestbedSpec::default()
    };
    if let Some(cap) = transitions_cap {
        spec.transitions_cap = cap;
    }
    let bundle = build_testbed(&spec).map_err(to_py)?;
    bundle.save(&out_dir).map_err(to_py)?;
    Ok(bundle.dataset.len())
}

/// Run the sweep described by a JSON config file; returns the CSV text.
#[pyfunction(name = "run_sweep")]
fn run_sweep_py(py: Python<'_>, config_path: PathBuf) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config_path).map_err(to_py)?;
    let table = py.detach(|| run_sweep(&cfg)).map_err(to_py)?;
    Ok(table.to_csv())
}

#[pymodule]
fn pycfdecode(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Trace>()?;
    m.add_function(wrap_pyfunction!(recover, m)?)?;
    m.add_function(wrap_pyfunction!(replay_py, m)?)?;
    m.add_function(wrap_pyfunction!(counterfactual, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(greedy, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_bias, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(qwk, m)?)?;
    m.add_function(wrap_pyfunction!(make_testbed, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep_py, m)?)?;
    Ok(())
}
