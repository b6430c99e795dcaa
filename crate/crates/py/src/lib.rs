//! Python module `deragec`: phonemization, phonetic retrieval, offline
//! correction runs and WER.

use std::path::PathBuf;

use deragec::corpus::Sample;
use deragec::correction::{Pipeline, PipelineMode, RunConfig};
use deragec::llm::{BackendKind, BackendSpec};
use deragec::metrics::corpus_wer;
use deragec::ne_index::{GazetteerEntry, PhoneticIndex};
use deragec::phonetics::{embedded_lexicon, phonemize as g2p, phonetic_similarity as ps, EditCosts};
use deragec::tagging::GazetteerTagger;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: deragec::Error) -> PyErr {
    match e {
        deragec::Error::Io(e) => PyIOError::new_err(e.to_string()),
        deragec::Error::Backend(e) => PyRuntimeError::new_err(e.to_string()),
        deragec::Error::Tagger { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Space-separated IPA segments for `text`.
#[pyfunction]
fn phonemize(text: &str) -> String {
    g2p(text, embedded_lexicon()).to_spaced()
}

/// Phonetic similarity in [0, 1] between two texts.
#[pyfunction]
fn phonetic_similarity(a: &str, b: &str) -> PyResult<f64> {
    let lex = embedded_lexicon();
    ps(&g2p(a, lex), &g2p(b, lex), &EditCosts::default()).map_err(to_py)
}

/// Corpus WER over paired references and hypotheses.
#[pyfunction]
fn wer(references: Vec<String>, hypotheses: Vec<String>) -> PyResult<f64> {
    if references.len() != hypotheses.len() {
        return Err(PyValueError::new_err("references and hypotheses differ in length"));
    }
    let pairs = references.iter().map(String::as_str).zip(hypotheses.iter().map(String::as_str));
    Ok(corpus_wer(pairs).map_err(to_py)?.wer)
}

/// Exact top-k phonetic index over a gazetteer.
#[pyclass(name = "Index", frozen)]
struct PyIndex {
    inner: PhoneticIndex,
}

#[pymethods]
impl PyIndex {
    /// Builds from `(surface, definition)` pairs.
    #[new]
    fn new(entries: Vec<(String, String)>) -> PyResult<Self> {
        let entries = entries.into_iter().map(|(s, d)| GazetteerEntry::new(s, d));
        Ok(Self {
            inner: PhoneticIndex::build(entries).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PhoneticIndex::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    /// `(surface, ps, definition)` for the `k` most similar entries.
    #[pyo3(signature = (text, k = 10))]
    fn retrieve(&self, text: &str, k: usize) -> PyResult<Vec<(String, f64, String)>> {
        Ok(self
            .inner
            .retrieve_text(text, k)
            .map_err(to_py)?
            .into_iter()
            .map(|c| (c.record.surface, c.ps, c.record.definition))
            .collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Corrects a JSON array of samples with an offline backend and returns
/// the run records as a JSON array. `mentions` extends the tagger beyond
/// the index surfaces.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (index, samples_json, mode = "deragec", backend = "heuristic", k = 10, seed = 0, mentions = None))]
fn run(
    py: Python<'_>,
    index: &PyIndex,
    samples_json: &str,
    mode: &str,
    backend: &str,
    k: usize,
    seed: u64,
    mentions: Option<Vec<String>>,
) -> PyResult<String> {
    let mode: PipelineMode = mode.parse().map_err(to_py)?;
    let kind: BackendKind = backend.parse().map_err(to_py)?;
    if matches!(kind, BackendKind::Http | BackendKind::Scripted) {
        return Err(PyValueError::new_err("only the heuristic and oracle backends run in-process"));
    }
    let mut samples: Vec<Sample> = serde_json::from_str(samples_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    for (i, s) in samples.iter_mut().enumerate() {
        s.validate(true).map_err(|m| PyValueError::new_err(format!("sample {i}: {m}")))?;
    }
    let mut config = RunConfig::new(mode);
    config.k = k;
    config.seed = seed;
    let index = &index.inner;
    py.detach(|| {
        let backend = BackendSpec::local(kind).build()?;
        let mut tagger = GazetteerTagger::new(index.records().iter().map(|r| r.surface.as_str()));
        tagger.extend(mentions.unwrap_or_default());
        let records = Pipeline::new(config, index, &tagger, backend.as_ref(), backend.as_ref(), &[])?.run(&samples)?;
        Ok(serde_json::to_string(&records)?)
    })
    .map_err(to_py)
}

#[pymodule]
#[pyo3(name = "deragec")]
fn deragec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(phonemize, m)?)?;
    m.add_function(wrap_pyfunction!(phonetic_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyIndex>()?;
    Ok(())
}
