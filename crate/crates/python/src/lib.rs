//! Python bindings for the codeadapt core crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use codeadapt::adapters::{AdapterSet, AdapterStackPolicy, Phase};
use codeadapt::budget::{adapter_closed_form, parameter_budget};
use codeadapt::config::{AdapterConfig, ModelConfig};
use codeadapt::corpus::generator::{generate_corpus, mini_language_vocab, Corpus as CoreCorpus};
use codeadapt::corpus::{load_corpus, save_corpus, tokenize as core_tokenize, Vocabulary};
use codeadapt::eval::bleu::smoothed_bleu4 as core_bleu;
use codeadapt::eval::classify::{f1 as core_f1, ConfusionCounts};
use codeadapt::eval::retrieval::mean_map_at_r;
use codeadapt::experiment::{Experiment as CoreExperiment, ExperimentConfig, Step};
use codeadapt::pipeline::{inference_assembly, language_assembly};
use codeadapt::transformer::{encode, init_backbone, EncoderInput};
use codeadapt::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Index(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn phase_from(name: &str) -> PyResult<Phase> {
    match name {
        "l_adapter_mlm" => Ok(Phase::LAdapterMlm),
        "t_adapter_task" => Ok(Phase::TAdapterTask),
        "full_finetune" => Ok(Phase::FullFinetune),
        _ => Err(PyValueError::new_err(format!("unknown phase {name:?}"))),
    }
}

fn step_from(name: &str) -> PyResult<Step> {
    Step::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown step {name:?}")))
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).map_err(py_err)
}

/// Tokens of the mini-language vocabulary, indexed by id.
#[pyfunction]
fn vocabulary() -> Vec<String> {
    mini_language_vocab().tokens().to_vec()
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core_tokenize(text)
}

/// Ids for `tokens`; unknown tokens map to the UNK id.
#[pyfunction]
fn encode_tokens(tokens: Vec<String>) -> Vec<usize> {
    mini_language_vocab().encode(&tokens)
}

#[pyfunction]
fn smoothed_bleu4(candidate: Vec<String>, reference: Vec<String>) -> f64 {
    core_bleu(&candidate, &reference)
}

/// Leave-one-out MAP@R over row embeddings.
#[pyfunction]
fn map_at_r(embeddings: Vec<Vec<f32>>, classes: Vec<usize>) -> PyResult<f64> {
    Ok(mean_map_at_r(&matrix(&embeddings)?, &classes).map_err(py_err)?.score)
}

#[pyfunction]
#[pyo3(signature = (tp, tn, fp, fn_))]
fn f1<'py>(py: Python<'py>, tp: u64, tn: u64, fp: u64, fn_: u64) -> PyResult<Bound<'py, PyDict>> {
    let s = core_f1(&ConfusionCounts { tp, tn, fp, fn_ });
    let d = PyDict::new(py);
    d.set_item("precision", s.precision)?;
    d.set_item("recall", s.recall)?;
    d.set_item("f1", s.f1)?;
    d.set_item("accuracy", s.accuracy)?;
    d.set_item("degenerate", s.degenerate)?;
    Ok(d)
}

#[pyfunction]
fn adapter_param_count(hidden: usize, bottleneck: usize, layers: usize) -> usize {
    adapter_closed_form(hidden, bottleneck, layers)
}

#[pyfunction]
fn efficiency_ratio(baseline_trainable: f64, adapter_trainable: f64) -> PyResult<f64> {
    codeadapt::budget::efficiency_ratio(baseline_trainable, adapter_trainable).map_err(py_err)
}

/// Synthetic code corpus with clone classes, docs and AST tags.
#[pyclass(module = "codeadapt_py")]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (seed=0, problems=20, solutions=4))]
    fn generate(seed: u64, problems: usize, solutions: usize) -> PyResult<Self> {
        Ok(Self {
            inner: generate_corpus(seed, problems, solutions).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_corpus(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_corpus(&self.inner, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// One sample as a dict of code, doc, body, class and bucket fields.
    fn sample<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyDict>> {
        let s = self
            .inner
            .samples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("sample {index} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("code", s.code_tokens.clone())?;
        d.set_item("doc", s.doc_tokens.clone())?;
        d.set_item("body", s.body_tokens().to_vec())?;
        d.set_item("clone_class", s.clone_class)?;
        d.set_item("length_bucket", s.length_bucket)?;
        d.set_item("cpx_bucket", s.cpx_bucket)?;
        Ok(d)
    }
}

/// A randomly initialised encoder, optionally with fresh language adapters.
#[pyclass(module = "codeadapt_py")]
struct Model {
    asm: codeadapt::assembly::ModelAssembly,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (layers=2, hidden=32, heads=2, ffn=64, seed=0, language_adapters=false, bottleneck=None))]
    fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        seed: u64,
        language_adapters: bool,
        bottleneck: Option<usize>,
    ) -> PyResult<Self> {
        let vocab: Vocabulary = mini_language_vocab();
        let config = ModelConfig {
            num_layers: layers,
            hidden_size: hidden,
            num_heads: heads,
            ffn_size: ffn,
            vocab_size: vocab.len(),
            dropout_rate: 0.0,
            ..ModelConfig::default()
        };
        let backbone = init_backbone(&config, seed).map_err(py_err)?;
        let asm = if language_adapters {
            let adapter = AdapterConfig {
                bottleneck,
                ..AdapterConfig::default()
            };
            language_assembly(&config, &adapter, &backbone, seed ^ 1)
        } else {
            inference_assembly(
                &config,
                &backbone,
                &AdapterSet::default(),
                &AdapterStackPolicy::none(layers),
                Default::default(),
            )
        }
        .map_err(py_err)?;
        Ok(Self { asm })
    }

    fn total_params(&self) -> usize {
        self.asm.total_params()
    }

    fn trainable_params(&self) -> usize {
        self.asm.trainable_params()
    }

    /// `(component, total, trainable)` rows for the given phase name.
    fn budget(&self, phase: &str) -> PyResult<Vec<(String, usize, usize)>> {
        let r = parameter_budget(&self.asm, phase_from(phase)?);
        Ok(r.components
            .iter()
            .map(|(c, n)| (c.name().to_string(), n.total, n.trainable))
            .collect())
    }

    fn fingerprint(&self) -> String {
        self.asm.current_frozen_fingerprint()
    }

    /// Final hidden states, one row per token, for a single id sequence.
    fn encode(&self, ids: Vec<usize>) -> PyResult<Vec<Vec<f32>>> {
        let input = EncoderInput::from_sequences(&[ids]).map_err(py_err)?;
        let out = encode(&self.asm, &input, false).map_err(py_err)?;
        let states = out.final_states();
        Ok((0..states.rows()).map(|i| states.row(i).to_vec()).collect())
    }
}

/// An experiment directory driven through the same steps as the CLI.
#[pyclass(module = "codeadapt_py")]
struct Experiment {
    inner: CoreExperiment,
}

#[pymethods]
impl Experiment {
    #[staticmethod]
    #[pyo3(signature = (dir, config_toml=None, quick=false, seed=None))]
    fn create(dir: PathBuf, config_toml: Option<&str>, quick: bool, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg = match (config_toml, quick) {
            (Some(t), _) => ExperimentConfig::from_toml(t).map_err(py_err)?,
            (None, true) => ExperimentConfig::quick(),
            (None, false) => ExperimentConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: CoreExperiment::create(&dir, cfg).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn open(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreExperiment::open(&dir).map_err(py_err)?,
        })
    }

    fn config_toml(&self) -> PyResult<String> {
        self.inner.config.to_toml().map_err(py_err)
    }

    /// Runs the named steps in order (all configured steps when omitted).
    #[pyo3(signature = (steps=None))]
    fn run(&self, steps: Option<Vec<String>>) -> PyResult<()> {
        let steps = match steps {
            Some(names) => names.iter().map(|n| step_from(n)).collect::<PyResult<Vec<_>>>()?,
            None => self.inner.config.steps.clone(),
        };
        self.inner.run(&steps).map_err(py_err)
    }

    fn report_path(&self, name: &str) -> PathBuf {
        self.inner.report_path(name)
    }
}

#[pymodule]
fn codeadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(encode_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(smoothed_bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(map_at_r, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add_function(wrap_pyfunction!(adapter_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(efficiency_ratio, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_class::<Experiment>()?;
    Ok(())
}
