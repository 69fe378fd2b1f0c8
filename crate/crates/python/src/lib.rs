//! Python bindings: corpus generation and loading, models, training,
//! evaluation, the individual objectives and gradient certification.

use std::collections::HashMap;
use std::path::PathBuf;

use globaldoc::autodiff::{Tape, Tensor};
use globaldoc::certify::certify_all;
use globaldoc::config::RunConfig;
use globaldoc::datagen::{self, Split};
use globaldoc::encoders::{Checkpoint, GlobalDocModel};
use globaldoc::evaluation::{self, DEFAULT_KS};
use globaldoc::objectives::{self, EntropySign, ObjectiveConfig, Setting, UnifyTarget};
use globaldoc::trainer::{lr_at, Trainer};
use globaldoc::{DocumentPair, Error, ErrorKind, Modality};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(err: Error) -> PyErr {
    match err.kind() {
        ErrorKind::Usage => PyValueError::new_err(err.to_string()),
        ErrorKind::Data => PyIOError::new_err(err.to_string()),
        ErrorKind::Numeric => PyArithmeticError::new_err(err.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for globaldoc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Resolved `key = value` configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (overrides=None, path=None))]
    fn new(overrides: Option<HashMap<String, String>>, path: Option<PathBuf>) -> PyResult<Self> {
        let mut ov: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
        ov.sort();
        Ok(Self {
            inner: RunConfig::resolve(path.as_deref(), &ov).py()?,
        })
    }

    fn get(&self, key: &str) -> Option<String> {
        self.inner.get(key).map(str::to_string)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()?;
        self.inner.validate().py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(<{} keys>)", globaldoc::config::KEYS.len())
    }
}

#[pyclass(name = "DocumentPair", from_py_object)]
#[derive(Clone)]
struct PyDocumentPair {
    inner: DocumentPair,
}

#[pymethods]
impl PyDocumentPair {
    #[getter]
    fn doc_id(&self) -> String {
        self.inner.doc_id.clone()
    }

    #[getter]
    fn label(&self) -> u32 {
        self.inner.label
    }

    #[getter]
    fn tokens(&self) -> Vec<u32> {
        self.inner.tokens.clone()
    }

    /// `(height, width, channels)`.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let i = &self.inner.image;
        (i.height, i.width, i.channels)
    }

    /// Row-major, channel-last pixel values.
    #[getter]
    fn pixels(&self) -> Vec<f32> {
        self.inner.image.pixels.clone()
    }
}

/// Write a corpus generated from `config` to `out_dir`; returns the
/// document count per split.
#[pyfunction]
fn generate_corpus(config: &PyRunConfig, out_dir: PathBuf) -> PyResult<HashMap<String, usize>> {
    let m = datagen::generate_corpus(&config.inner.generator().py()?, &out_dir).py()?;
    Ok(Split::ALL.iter().map(|s| (s.name().to_string(), m.count(*s))).collect())
}

#[pyfunction]
#[pyo3(signature = (path, split="train"))]
fn load_corpus(path: PathBuf, split: &str) -> PyResult<Vec<PyDocumentPair>> {
    let split: Split = split.parse().py()?;
    let docs = datagen::load_corpus(&path, split).py()?;
    Ok(docs.into_iter().map(|inner| PyDocumentPair { inner }).collect())
}

fn parse_modality(s: &str) -> PyResult<Modality> {
    s.parse::<Modality>().py()
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: GlobalDocModel<f32>,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for `config`.
    #[new]
    fn new(config: &PyRunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: GlobalDocModel::new(config.inner.model().py()?).py()?,
            config: config.inner.clone(),
        })
    }

    /// Model for `config` with weights read from a checkpoint file.
    #[staticmethod]
    fn load(config: &PyRunConfig, path: PathBuf) -> PyResult<Self> {
        let mut m = Self::new(config)?;
        m.inner.load_checkpoint(&Checkpoint::read(&path).py()?).py()?;
        Ok(m)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().write(&path).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    #[getter]
    fn digest(&self) -> String {
        self.inner.config().digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Unit embedding of `pair` for `modality` (vision, language or
    /// multimodal).
    #[pyo3(signature = (pair, modality="multimodal"))]
    fn embed(&self, pair: &PyDocumentPair, modality: &str) -> PyResult<Vec<f32>> {
        let spec = self.config.embed_spec().py()?;
        Ok(self.inner.embed(&pair.inner, parse_modality(modality)?, spec).py()?.vector)
    }

    /// Pretrain in place on the corpus train split; returns per-step
    /// metrics as dictionaries.
    #[pyo3(signature = (corpus_dir, out_dir=None))]
    fn train(&mut self, py: Python<'_>, corpus_dir: PathBuf, out_dir: Option<PathBuf>) -> PyResult<Vec<HashMap<String, f64>>> {
        let docs = datagen::load_corpus(&corpus_dir, Split::Train).py()?;
        let cfg = self.config.train().py()?;
        let model = self.inner.clone();
        let trainer = py
            .detach(|| -> globaldoc::Result<Trainer> {
                let mut t = Trainer::new(cfg, model)?;
                t.train(&docs, out_dir.as_deref())?;
                Ok(t)
            })
            .py()?;
        self.inner = trainer.model;
        Ok(trainer
            .history
            .iter()
            .map(|m| {
                HashMap::from([
                    ("step".to_string(), m.step as f64),
                    ("loss_total".to_string(), m.losses.total),
                    ("loss_l2m_inter".to_string(), m.losses.l2m_inter),
                    ("loss_l2m_intra".to_string(), m.losses.l2m_intra),
                    ("loss_l2u".to_string(), m.losses.l2u),
                    ("loss_l2r_v".to_string(), m.losses.l2r_vision),
                    ("loss_l2r_t".to_string(), m.losses.l2r_language),
                    ("lr".to_string(), m.lr),
                ])
            })
            .collect())
    }

    /// Recall@{1,5,10} on the corpus test split, keyed like `"V->L"`.
    fn retrieval(&self, py: Python<'_>, corpus_dir: PathBuf) -> PyResult<HashMap<String, Vec<f64>>> {
        let docs = datagen::load_corpus(&corpus_dir, Split::Test).py()?;
        let spec = self.config.embed_spec().py()?;
        let report = py
            .detach(|| evaluation::retrieval_report(&self.inner, &docs, spec, &DEFAULT_KS))
            .py()?;
        Ok(report
            .rows
            .into_iter()
            .map(|(q, i, t)| (format!("{}->{}", q.short(), i.short()), t.recall))
            .collect())
    }

    /// Few-shot `(accuracy, ci95)` on the novel classes of the test split.
    #[pyo3(signature = (corpus_dir, modality="multimodal"))]
    fn fewshot(&self, py: Python<'_>, corpus_dir: PathBuf, modality: &str) -> PyResult<(f64, f64)> {
        let docs = datagen::load_corpus(&corpus_dir, Split::Test).py()?;
        let (_, novel) = self.config.class_split().py()?;
        let spec = self.config.embed_spec().py()?;
        let ep = self.config.episode().py()?;
        let modality = parse_modality(modality)?;
        let r = py
            .detach(|| evaluation::run_fewshot_eval(&self.inner, &docs, &novel, modality, spec, &ep))
            .py()?;
        Ok((r.mean, r.ci95))
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor<f64>> {
    Tensor::from_rows(&rows).py()
}

/// L2M inter-modal loss with explicit neighbor matrices.
#[pyfunction]
#[pyo3(signature = (vision, language, nn_vision, nn_language, temperature=0.07, nn_in_denominator=false))]
fn l2m_inter(
    vision: Vec<Vec<f64>>,
    language: Vec<Vec<f64>>,
    nn_vision: Vec<Vec<f64>>,
    nn_language: Vec<Vec<f64>>,
    temperature: f64,
    nn_in_denominator: bool,
) -> PyResult<f64> {
    let cfg = ObjectiveConfig {
        temperature,
        nn_in_denominator,
        ..ObjectiveConfig::default()
    };
    let mut t = Tape::new();
    let [v, l, nv, nl] = [vision, language, nn_vision, nn_language].map(|m| matrix(m).map(|m| t.constant(m)));
    let out = objectives::l2m_inter(&mut t, v?, l?, nv?, nl?, &cfg).py()?;
    Ok(t.value(out).item())
}

/// L2M intra-modal loss with explicit neighbor matrices.
#[pyfunction]
#[pyo3(signature = (vision, language, nn_vision, nn_language, temperature=0.07, nn_in_denominator=false))]
fn l2m_intra(
    vision: Vec<Vec<f64>>,
    language: Vec<Vec<f64>>,
    nn_vision: Vec<Vec<f64>>,
    nn_language: Vec<Vec<f64>>,
    temperature: f64,
    nn_in_denominator: bool,
) -> PyResult<f64> {
    let cfg = ObjectiveConfig {
        temperature,
        nn_in_denominator,
        ..ObjectiveConfig::default()
    };
    let mut t = Tape::new();
    let [v, l, nv, nl] = [vision, language, nn_vision, nn_language].map(|m| matrix(m).map(|m| t.constant(m)));
    let out = objectives::l2m_intra(&mut t, v?, l?, nv?, nl?, &cfg).py()?;
    Ok(t.value(out).item())
}

#[pyfunction]
#[pyo3(signature = (vision, language, target="hard", temperature=1.0))]
fn l2u_loss(vision: Vec<Vec<f64>>, language: Vec<Vec<f64>>, target: &str, temperature: f64) -> PyResult<f64> {
    let target: UnifyTarget = target.parse().py()?;
    let mut t = Tape::new();
    let v = t.constant(matrix(vision)?);
    let l = t.constant(matrix(language)?);
    let out = objectives::l2u_loss(&mut t, v, l, target, temperature).py()?;
    Ok(t.value(out).item())
}

/// L2R for one modality; returns `(total, consistency, entropy_term)`.
#[pyfunction]
#[pyo3(signature = (anchors, neighbors, k, lam=2.0, entropy_sign="maximize"))]
fn l2r_loss(anchors: Vec<Vec<f64>>, neighbors: Vec<Vec<f64>>, k: usize, lam: f64, entropy_sign: &str) -> PyResult<(f64, f64, f64)> {
    let sign: EntropySign = entropy_sign.parse().py()?;
    let mut t = Tape::new();
    let a = t.constant(matrix(anchors)?);
    let n = t.constant(matrix(neighbors)?);
    let r = objectives::l2r_loss(&mut t, a, n, k, lam, sign).py()?;
    Ok((t.value(r.total).item(), t.value(r.consistency).item(), t.value(r.entropy).item()))
}

/// `softmax(−squared distance)` over prototypes.
#[pyfunction]
fn classify_query(query: Vec<f32>, prototypes: Vec<Vec<f64>>) -> Vec<f64> {
    evaluation::classify_query(&query, &prototypes, evaluation::DistanceKind::SquaredEuclidean)
}

#[pyfunction]
fn learning_rate(step: usize, config: &PyRunConfig) -> PyResult<f64> {
    Ok(lr_at(step, &config.inner.train().py()?))
}

/// Certify every objective; returns `(name, passed, max_relative_error)`.
#[pyfunction]
#[pyo3(signature = (setting="S3", dim=8, seed=0, max_coords=None))]
fn gradcheck(py: Python<'_>, setting: &str, dim: usize, seed: u64, max_coords: Option<usize>) -> PyResult<Vec<(String, bool, f64)>> {
    let setting: Setting = setting.parse().py()?;
    let certs = py.detach(|| certify_all(setting, dim, seed, max_coords)).py()?;
    Ok(certs
        .into_iter()
        .map(|c| (c.name.to_string(), c.report.passed(), c.report.max_error()))
        .collect())
}

#[pymodule]
fn globaldoc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDocumentPair>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(l2m_inter, m)?)?;
    m.add_function(wrap_pyfunction!(l2m_intra, m)?)?;
    m.add_function(wrap_pyfunction!(l2u_loss, m)?)?;
    m.add_function(wrap_pyfunction!(l2r_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classify_query, m)?)?;
    m.add_function(wrap_pyfunction!(learning_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
