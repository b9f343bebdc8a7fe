//! Python bindings: n-gram training, lockstep and FewGen decoding, the
//! guidance primitives, diversity metrics and forward-pass predictions.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use corrsynth::baselines::fewgen_generate;
use corrsynth::guidance::{self, ActiveSet, GuidanceConfig, GuidanceMode};
use corrsynth::lockstep::lockstep_generate;
use corrsynth::metrics;
use corrsynth::model::{Model, NGramModel as CoreNGram, TokenizerKind};
use corrsynth::orchestrator::{predicted_forward_passes as predict, PassMethod};
use corrsynth::sampling::SamplingParams;
use corrsynth::{LogitVector, TokenId};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_tokenizer(name: &str) -> PyResult<TokenizerKind> {
    match name {
        "whitespace" => Ok(TokenizerKind::Whitespace),
        "char" => Ok(TokenizerKind::Char),
        other => Err(value_err(format!("unknown tokenizer {other:?}"))),
    }
}

/// A trained n-gram language model together with its tokenizer.
#[pyclass(module = "corrsynth_py")]
struct NGramModel {
    inner: CoreNGram,
    tokenizer: TokenizerKind,
}

#[pymethods]
impl NGramModel {
    #[staticmethod]
    #[pyo3(signature = (lines, order=2, smoothing=0.1, tokenizer="whitespace"))]
    fn train(lines: Vec<String>, order: usize, smoothing: f64, tokenizer: &str) -> PyResult<Self> {
        let tokenizer = parse_tokenizer(tokenizer)?;
        let inner = corrsynth::io::train_lm_from_lines(&lines, tokenizer, order, smoothing)
            .map_err(value_err)?;
        Ok(NGramModel { inner, tokenizer })
    }

    #[staticmethod]
    #[pyo3(signature = (path, tokenizer="whitespace"))]
    fn load(path: PathBuf, tokenizer: &str) -> PyResult<Self> {
        let inner = CoreNGram::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(NGramModel {
            inner,
            tokenizer: parse_tokenizer(tokenizer)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner
            .save(&path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab().size()
    }

    #[getter]
    fn eos_id(&self) -> TokenId {
        self.inner.vocab().eos_id()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<TokenId>> {
        self.tokenizer
            .encode(text, self.inner.vocab())
            .map_err(value_err)
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        self.tokenizer.decode(&ids, self.inner.vocab())
    }

    /// Next-token log-probabilities after `prefix`.
    fn log_probs(&self, prefix: Vec<TokenId>) -> Vec<f64> {
        self.inner.log_probs(&prefix)
    }

    fn __repr__(&self) -> String {
        format!(
            "NGramModel(order={}, vocab_size={})",
            self.inner.order(),
            self.inner.vocab().size()
        )
    }
}

fn sampling(
    top_p: f64,
    temperature: f64,
    greedy: bool,
    max_tokens: usize,
    seed: u64,
) -> SamplingParams {
    SamplingParams {
        top_p,
        temperature,
        greedy,
        max_tokens,
        seed,
    }
}

fn parse_mode(name: &str) -> PyResult<GuidanceMode> {
    match name {
        "uniform" => Ok(GuidanceMode::Uniform),
        "cross" => Ok(GuidanceMode::Cross),
        "intra" => Ok(GuidanceMode::Intra),
        "hybrid" => Ok(GuidanceMode::Hybrid),
        other => Err(value_err(format!("unknown mode {other:?}"))),
    }
}

/// Decodes all prompts jointly. Returns a dict with `sequences`,
/// `truncated` and `passes`.
#[pyfunction]
#[pyo3(signature = (
    model, prompts, class_of, mode="cross", gamma=1.0, delta=0.9, gamma_intra=None,
    gamma_cross=None, alpha=None, repeat=1, top_p=1.0, temperature=1.0, greedy=false,
    max_tokens=32, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn lockstep<'py>(
    py: Python<'py>,
    model: &NGramModel,
    prompts: Vec<Vec<TokenId>>,
    class_of: Vec<usize>,
    mode: &str,
    gamma: f64,
    delta: f64,
    gamma_intra: Option<f64>,
    gamma_cross: Option<f64>,
    alpha: Option<f64>,
    repeat: usize,
    top_p: f64,
    temperature: f64,
    greedy: bool,
    max_tokens: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = match parse_mode(mode)? {
        GuidanceMode::Hybrid => GuidanceConfig::hybrid(
            gamma,
            gamma_intra.ok_or_else(|| value_err("hybrid mode needs gamma_intra"))?,
            gamma_cross.ok_or_else(|| value_err("hybrid mode needs gamma_cross"))?,
        ),
        m => GuidanceConfig::new(m, gamma, delta),
    }
    .with_alpha(alpha)
    .with_repeat(repeat);
    let params = sampling(top_p, temperature, greedy, max_tokens, seed);
    let engine = Model::new(model.inner.clone());
    let out = lockstep_generate(&engine, &prompts, &cfg, &class_of, &params)
        .map_err(|e| value_err(e.source))?;
    let dict = PyDict::new(py);
    dict.set_item("sequences", out.sequences)?;
    dict.set_item("truncated", out.truncated)?;
    dict.set_item("passes", out.passes)?;
    Ok(dict)
}

/// Independent decoding of one prompt. Returns `(tokens, truncated, passes)`.
#[pyfunction]
#[pyo3(signature = (model, prompt, top_p=1.0, temperature=1.0, greedy=false, max_tokens=32, seed=0))]
fn fewgen(
    model: &NGramModel,
    prompt: Vec<TokenId>,
    top_p: f64,
    temperature: f64,
    greedy: bool,
    max_tokens: usize,
    seed: u64,
) -> PyResult<(Vec<TokenId>, bool, u64)> {
    let engine = Model::new(model.inner.clone());
    let params = sampling(top_p, temperature, greedy, max_tokens, seed);
    let out = fewgen_generate(&engine, &prompt, &params).map_err(value_err)?;
    Ok((out.tokens, out.truncated, out.passes))
}

/// Weights of every sequence against `m` under uniform contrast.
#[pyfunction]
fn uniform_weights(m: usize, num_sequences: usize, gamma: f64, delta: f64) -> PyResult<Vec<f64>> {
    guidance::uniform_weights(m, &ActiveSet::all(num_sequences), gamma, delta).map_err(value_err)
}

/// `gamma * numerator - sum_j weights[j] * contrasts[j]` over log-probabilities.
#[pyfunction]
fn combine_logits(
    numerator: Vec<f64>,
    contrasts: Vec<Vec<f64>>,
    weights: Vec<f64>,
    gamma: f64,
) -> PyResult<Vec<f64>> {
    let num = LogitVector::log_probs(numerator).map_err(value_err)?;
    let cons = contrasts
        .into_iter()
        .map(LogitVector::log_probs)
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let refs: Vec<&LogitVector> = cons.iter().collect();
    let out = guidance::combine_logits(&num, &refs, &weights, gamma).map_err(value_err)?;
    Ok(out.values().to_vec())
}

#[pyfunction]
#[pyo3(signature = (texts, max_n=5))]
fn self_bleu(texts: Vec<String>, max_n: usize) -> PyResult<f64> {
    metrics::self_bleu(&texts, max_n).map_err(value_err)
}

#[pyfunction]
fn token_entropy(texts: Vec<String>) -> PyResult<f64> {
    metrics::token_entropy(&texts).map_err(value_err)
}

#[pyfunction]
fn distinct_n(texts: Vec<String>, n: usize) -> PyResult<f64> {
    metrics::distinct_n(&texts, n).map_err(value_err)
}

/// Closed-form forward passes for `method` in `fewgen`, `corrsynth`,
/// `cfg-intra`, `cfg-cross`, `cfg-hybrid`. Returns `(passes, exact)`.
#[pyfunction]
fn predicted_forward_passes(
    method: &str,
    n: u64,
    k: u64,
    r: u64,
    length: u64,
) -> PyResult<(u64, bool)> {
    let method = match method {
        "fewgen" => PassMethod::FewGen,
        "corrsynth" => PassMethod::CorrSynth,
        "cfg-intra" => PassMethod::CfgIntra,
        "cfg-cross" => PassMethod::CfgCross,
        "cfg-hybrid" => PassMethod::CfgHybrid,
        other => return Err(value_err(format!("unknown method {other:?}"))),
    };
    let p = predict(method, n, k, r, length).map_err(value_err)?;
    Ok((p.passes, p.exact))
}

#[pymodule]
fn corrsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<NGramModel>()?;
    m.add_function(wrap_pyfunction!(lockstep, m)?)?;
    m.add_function(wrap_pyfunction!(fewgen, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_weights, m)?)?;
    m.add_function(wrap_pyfunction!(combine_logits, m)?)?;
    m.add_function(wrap_pyfunction!(self_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(token_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(distinct_n, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_forward_passes, m)?)?;
    Ok(())
}
