//! Python bindings. Results are handed back as plain dicts and lists (via
//! their JSON form), so Python callers never see Rust-specific types.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use dialmem_core::backend::embed::{Embedder, HashEmbedder};
use dialmem_core::backend::{AnswerMode, Gateway};
use dialmem_core::engine::{self, BuildOptions, RetrieveOptions};
use dialmem_core::eval::loader::{self, Corpus};
use dialmem_core::eval::{self, ContainmentJudge, EvalOptions};
use dialmem_core::extraction;
use dialmem_core::model::{validate_config, PipelineConfig, Query};
use dialmem_core::{synthetic, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NotFound(_) => PyKeyError::new_err(e.to_string()),
        Error::Backend(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyModule::import(py, "json")?.call_method1("loads", (text,))?.unbind())
}

/// A pipeline configuration: key strategy, value kind, index kind and the
/// graph retrieval knobs.
#[pyclass(name = "Config", module = "dialmem")]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses and validates TOML; missing fields take defaults. With no
    /// argument returns the default flat configuration.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(raw) => PipelineConfig::from_toml_str(raw).map_err(py_err)?,
            None => PipelineConfig::default(),
        };
        validate_config(&inner).into_result().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    /// Graph index over description-bearing entities.
    #[staticmethod]
    fn desc_graph() -> Self {
        PyConfig {
            inner: PipelineConfig::desc_graph(),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(key_strategy={:?}, value_kind={:?}, index_kind={:?})",
            self.inner.key_strategy, self.inner.value_kind, self.inner.index_kind
        )
    }
}

/// Sessions plus benchmark questions.
#[pyclass(name = "Corpus", module = "dialmem")]
struct PyCorpus {
    inner: Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Loads a corpus file in any supported shape.
    #[staticmethod]
    #[pyo3(signature = (path, name=None))]
    fn load(path: PathBuf, name: Option<&str>) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: loader::load_corpus(&path, name).map_err(py_err)?,
        })
    }

    /// Synthetic corpus with planted evidence: kind is "benchmark",
    /// "maintenance" or "random".
    #[staticmethod]
    #[pyo3(signature = (kind, seed=0, sessions=500))]
    fn synthetic(kind: &str, seed: u64, sessions: usize) -> PyResult<Self> {
        let inner = match kind {
            "benchmark" => synthetic::benchmark(seed),
            "maintenance" => synthetic::maintenance(seed).corpus,
            "random" => synthetic::random_dialogues(seed, sessions),
            other => return Err(PyValueError::new_err(format!("unknown corpus kind {other:?}"))),
        };
        Ok(PyCorpus { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        loader::write_native(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn session_ids(&self) -> Vec<String> {
        self.inner.sessions.iter().map(|s| s.session_id.clone()).collect()
    }

    fn questions(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner.questions)
    }

    fn __len__(&self) -> usize {
        self.inner.sessions.len()
    }
}

/// A built memory index.
#[pyclass(name = "Memory", module = "dialmem")]
struct PyMemory {
    inner: engine::Memory,
    gateway: Gateway,
}

#[pymethods]
impl PyMemory {
    /// Builds an index with the deterministic offline backend.
    #[staticmethod]
    #[pyo3(signature = (corpus, config, dimension=256, max_parallel=4))]
    fn build(py: Python<'_>, corpus: &PyCorpus, config: &PyConfig, dimension: usize, max_parallel: usize) -> PyResult<Self> {
        let gateway = Gateway::mock(dimension);
        let embedder: Arc<dyn Embedder> = Arc::new(HashEmbedder::new(dimension));
        let (inner, _) = py
            .allow_threads(|| {
                engine::build(&corpus.inner, &config.inner, &gateway, embedder, BuildOptions { max_parallel })
            })
            .map_err(py_err)?;
        Ok(PyMemory { inner, gateway })
    }

    /// Loads an index saved by `save` or the command-line tool.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = engine::Memory::load(&path, None).map_err(py_err)?;
        let gateway = Gateway::mock(inner.embedder().spec().dimension);
        Ok(PyMemory { inner, gateway })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Ranked values for a query: a list of dicts with `value`, `score` and,
    /// for graph indices, the per-signal scores.
    #[pyo3(signature = (query, k=None, n=None, sessions=None))]
    fn retrieve(
        &self,
        py: Python<'_>,
        query: &str,
        k: Option<usize>,
        n: Option<usize>,
        sessions: Option<Vec<String>>,
    ) -> PyResult<PyObject> {
        let haystack: Option<HashSet<String>> = sessions.map(|s| s.into_iter().collect());
        let q = Query::new(query).map_err(py_err)?;
        let trace = self
            .inner
            .retrieve(
                &q,
                RetrieveOptions {
                    k_keys: k,
                    n_values: n,
                    haystack: haystack.as_ref(),
                },
            )
            .map_err(py_err)?;
        to_py(py, &trace.values)
    }

    /// The full retrieval trace, including ranked keys and graph activation.
    #[pyo3(signature = (query, k=None, n=None))]
    fn trace(&self, py: Python<'_>, query: &str, k: Option<usize>, n: Option<usize>) -> PyResult<PyObject> {
        let q = Query::new(query).map_err(py_err)?;
        let trace = self
            .inner
            .retrieve(
                &q,
                RetrieveOptions {
                    k_keys: k,
                    n_values: n,
                    haystack: None,
                },
            )
            .map_err(py_err)?;
        to_py(py, &trace)
    }

    /// Retrieval metrics, plus answer accuracy when `answer` is true (judged
    /// by gold-answer containment).
    #[pyo3(signature = (corpus, answer=false, k=None, n=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        corpus: &PyCorpus,
        answer: bool,
        k: Option<usize>,
        n: Option<usize>,
    ) -> PyResult<PyObject> {
        let options = EvalOptions {
            k_keys: k,
            n_values: n,
            ..EvalOptions::default()
        };
        let c = &corpus.inner;
        let report = py
            .allow_threads(|| {
                if answer {
                    eval::run_qa_eval(
                        &self.inner,
                        &c.questions,
                        &c.name,
                        &self.gateway,
                        &ContainmentJudge,
                        AnswerMode::ChainOfNote,
                        options,
                    )
                } else {
                    eval::run_retrieval_eval(&self.inner, &c.questions, &c.name, options)
                }
            })
            .map_err(py_err)?;
        to_py(py, &report)
    }

    fn counts(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner.counts())
    }

    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config.clone(),
        }
    }
}

/// Parses raw extraction output into entities, relations and warnings.
#[pyfunction]
fn parse_extraction(py: Python<'_>, raw: &str) -> PyResult<PyObject> {
    to_py(py, &extraction::parse_extraction(raw))
}

/// Fraction of ground-truth ids among the first `k` retrieved.
#[pyfunction]
fn recall_at_k(retrieved: Vec<String>, ground_truth: HashSet<String>, k: usize) -> PyResult<f64> {
    eval::metrics::recall_at_k(&retrieved, &ground_truth, k).map_err(py_err)
}

/// Binary-relevance NDCG over the first `k` retrieved.
#[pyfunction]
fn ndcg_at_k(retrieved: Vec<String>, ground_truth: HashSet<String>, k: usize) -> PyResult<f64> {
    eval::metrics::ndcg_at_k(&retrieved, &ground_truth, k).map_err(py_err)
}

#[pymodule]
fn dialmem(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Adds every class and function to `m`; used by the module initialiser and
/// by tests that embed an interpreter.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyMemory>()?;
    m.add_function(wrap_pyfunction!(parse_extraction, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    Ok(())
}
