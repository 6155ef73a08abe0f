//! Python bindings for the `xrecog` library.
//!
//! Configuration structs are passed as JSON strings with the same keys as
//! the TOML run config sections.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use xrecog::dataset::{self, SplitSpec, SyntheticConfig};
use xrecog::encoder::{self, EncoderConfig, EncoderParams};
use xrecog::eval::{self, EvalConfig, Orientation, PairLabel, ScoredPair, ThresholdCriterion};
use xrecog::metric;
use xrecog::probe::{self, ProbeConfig};
use xrecog::trainer::{self, TrainConfig};

fn py_err(e: xrecog::Error) -> PyErr {
    match e {
        xrecog::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

/// A manifest: records with patient ids, attributes and feature vectors.
#[pyclass(name = "Dataset", module = "xrecog_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset(dataset::DataSet);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        dataset::load_manifest(&path).map(PyDataset).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::save_manifest(&self.0, &path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.0.ambient_dim()
    }

    #[getter]
    fn num_patients(&self) -> usize {
        self.0.num_patients()
    }

    fn patient_ids(&self) -> Vec<String> {
        self.0.records().iter().map(|r| r.patient_id.clone()).collect()
    }

    fn image_ids(&self) -> Vec<String> {
        self.0.records().iter().map(|r| r.image_id.clone()).collect()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.0.records().iter().map(|r| r.features.clone()).collect()
    }

    fn attribute_names(&self) -> Vec<String> {
        self.0.attribute_names()
    }

    /// Patient-disjoint (train, validation, test) split.
    #[pyo3(signature = (train=0.7, validation=0.1, test=0.2, seed=0))]
    fn split(&self, train: f64, validation: f64, test: f64, seed: u64) -> PyResult<(Self, Self, Self)> {
        let spec = SplitSpec {
            train,
            validation,
            test,
            seed,
        };
        let (a, b, c) = dataset::split_by_patient(&self.0, &spec).map_err(py_err)?;
        Ok((PyDataset(a), PyDataset(b), PyDataset(c)))
    }
}

/// Generates a synthetic dataset from a JSON `SyntheticConfig`.
/// With `ood=True`, generates the shifted companion instead.
#[pyfunction]
#[pyo3(signature = (config_json, ood=false))]
fn generate_synthetic(config_json: &str, ood: bool) -> PyResult<PyDataset> {
    let cfg: SyntheticConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let cfg = if ood {
        cfg.out_of_distribution()
            .ok_or_else(|| PyValueError::new_err("config has no ood_shift"))?
    } else {
        cfg.in_distribution()
    };
    dataset::generate_synthetic(&cfg).map(PyDataset).map_err(py_err)
}

/// MLP embedding network.
#[pyclass(name = "Encoder", module = "xrecog_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyEncoder(EncoderParams);

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (input_dim, hidden_dims=vec![], output_dim=32, normalize_output=true, seed=0))]
    fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, normalize_output: bool, seed: u64) -> PyResult<Self> {
        let mut cfg = EncoderConfig::new(input_dim, hidden_dims, output_dim);
        cfg.normalize_output = normalize_output;
        cfg.init_seed = seed;
        EncoderParams::init(&cfg).map(PyEncoder).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        encoder::load_checkpoint(&path).map(PyEncoder).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        encoder::save_checkpoint(&self.0, &path).map_err(py_err)
    }

    fn embed(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.forward(&x).map(|(e, _)| e).map_err(py_err)
    }

    fn embed_dataset(&self, data: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        trainer::embed_all(&self.0, &data.0).map_err(py_err)
    }

    /// Parameter gradients of `grad_embedding . f(x)`, flattened layer by
    /// layer (weights then biases).
    fn backward(&self, x: Vec<f64>, grad_embedding: Vec<f64>) -> PyResult<Vec<f64>> {
        let (_, trace) = self.0.forward(&x).map_err(py_err)?;
        let (grads, _) = self.0.backward(&trace, &grad_embedding).map_err(py_err)?;
        Ok(grads.flatten())
    }

    fn parameters(&self) -> Vec<f64> {
        self.0.flatten()
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    fn digest(&self) -> String {
        self.0.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.0.config().output_dim
    }
}

#[pyfunction]
fn squared_l2(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    metric::squared_l2(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, alpha=metric::DEFAULT_MARGIN))]
fn triplet_loss(anchor: Vec<f64>, positive: Vec<f64>, negative: Vec<f64>, alpha: f64) -> PyResult<f64> {
    metric::triplet_loss(&anchor, &positive, &negative, alpha).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (anchor, positive, negative, alpha=metric::DEFAULT_MARGIN))]
fn triplet_loss_grad(
    anchor: Vec<f64>,
    positive: Vec<f64>,
    negative: Vec<f64>,
    alpha: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    metric::triplet_loss_grad(&anchor, &positive, &negative, alpha).map_err(py_err)
}

fn scored(scores: Vec<f64>, same: Vec<bool>) -> PyResult<Vec<ScoredPair>> {
    if scores.len() != same.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores
        .into_iter()
        .zip(same)
        .map(|(score, s)| ScoredPair {
            score,
            label: if s { PairLabel::Same } else { PairLabel::Different },
        })
        .collect())
}

fn orientation(higher_is_same: bool) -> Orientation {
    if higher_is_same {
        Orientation::HigherIsSame
    } else {
        Orientation::LowerIsSame
    }
}

/// AUROC of distance scores; `same[i]` marks same-patient pairs.
#[pyfunction]
#[pyo3(signature = (scores, same, higher_is_same=false))]
fn auroc(scores: Vec<f64>, same: Vec<bool>, higher_is_same: bool) -> PyResult<f64> {
    eval::auroc_oriented(&scored(scores, same)?, orientation(higher_is_same)).map_err(py_err)
}

/// ROC points as (threshold, fpr, tpr) triples.
#[pyfunction]
#[pyo3(signature = (scores, same, higher_is_same=false))]
fn roc_curve(scores: Vec<f64>, same: Vec<bool>, higher_is_same: bool) -> PyResult<Vec<(f64, f64, f64)>> {
    let curve = eval::roc_curve(&scored(scores, same)?, orientation(higher_is_same)).map_err(py_err)?;
    Ok(curve.points.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect())
}

#[pyfunction]
#[pyo3(signature = (scores, same, higher_is_same=false))]
fn eer(scores: Vec<f64>, same: Vec<bool>, higher_is_same: bool) -> PyResult<f64> {
    let curve = eval::roc_curve(&scored(scores, same)?, orientation(higher_is_same)).map_err(py_err)?;
    Ok(eval::eer(&curve))
}

/// Threshold maximizing accuracy, or the loosest one with FPR <= `target_fpr`.
/// Returns (threshold, accuracy, fpr, tpr).
#[pyfunction]
#[pyo3(signature = (scores, same, target_fpr=None, higher_is_same=false))]
fn select_threshold(
    scores: Vec<f64>,
    same: Vec<bool>,
    target_fpr: Option<f64>,
    higher_is_same: bool,
) -> PyResult<(f64, f64, f64, f64)> {
    let criterion = match target_fpr {
        Some(f) => ThresholdCriterion::TargetFpr(f),
        None => ThresholdCriterion::MaxAccuracy,
    };
    let c = eval::select_threshold(&scored(scores, same)?, criterion, orientation(higher_is_same)).map_err(py_err)?;
    Ok((c.threshold, c.accuracy, c.fpr, c.tpr))
}

/// Trains a copy of `encoder`. Returns the trained encoder and a history
/// dict with `train_loss`, `val_loss` and `val_auroc` lists.
#[pyfunction]
#[pyo3(signature = (encoder, train_set, val_set, config_json=None))]
fn train<'py>(
    py: Python<'py>,
    encoder: &PyEncoder,
    train_set: &PyDataset,
    val_set: &PyDataset,
    config_json: Option<&str>,
) -> PyResult<(PyEncoder, Bound<'py, PyDict>)> {
    let cfg: TrainConfig = from_json(config_json)?;
    let (params, history) = py
        .detach(|| trainer::train(&cfg, &encoder.0, &train_set.0, &val_set.0))
        .map_err(py_err)?;
    let h = PyDict::new(py);
    h.set_item("train_loss", history.train_loss)?;
    h.set_item("val_loss", history.val_loss)?;
    h.set_item("val_auroc", history.val_auroc)?;
    Ok((PyEncoder(params), h))
}

/// Verification reports (one dict per configured setting).
#[pyfunction]
#[pyo3(signature = (encoder, test_set, val_set, ood_set=None, config_json=None))]
fn evaluate<'py>(
    py: Python<'py>,
    encoder: &PyEncoder,
    test_set: &PyDataset,
    val_set: &PyDataset,
    ood_set: Option<&PyDataset>,
    config_json: Option<&str>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg: EvalConfig = from_json(config_json)?;
    let reports = py
        .detach(|| eval::evaluate(&encoder.0, &test_set.0, &val_set.0, ood_set.map(|d| &d.0), &cfg))
        .map_err(py_err)?;
    reports
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("setting", r.setting)?;
            d.set_item("n_pos", r.n_pos)?;
            d.set_item("n_neg", r.n_neg)?;
            d.set_item("auroc", r.auroc)?;
            d.set_item("eer", r.eer)?;
            d.set_item("tpr_at_fpr", r.tpr_at_fpr)?;
            d.set_item("threshold", r.threshold)?;
            d.set_item("validation_accuracy", r.validation_accuracy)?;
            d.set_item("test_accuracy", r.test_accuracy)?;
            Ok(d)
        })
        .collect()
}

/// Fits a linear probe for `attribute` on frozen embeddings of `train_set`
/// and reports on `test_set`.
#[pyfunction]
#[pyo3(signature = (encoder, train_set, test_set, attribute, seed=0, buckets=None))]
fn run_probe<'py>(
    py: Python<'py>,
    encoder: &PyEncoder,
    train_set: &PyDataset,
    test_set: &PyDataset,
    attribute: &str,
    seed: u64,
    buckets: Option<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = ProbeConfig::new(attribute);
    cfg.seed = seed;
    cfg.buckets = buckets;
    let (_, report) = py
        .detach(|| probe::run_probe(&encoder.0, &train_set.0, &test_set.0, &cfg))
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("task", report.task)?;
    d.set_item("accuracy", report.accuracy)?;
    d.set_item("majority_baseline", report.majority_baseline)?;
    d.set_item("per_class_auroc", report.per_class_auroc)?;
    d.set_item("n", report.n)?;
    Ok(d)
}

#[pymodule]
fn xrecog_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(squared_l2, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(eer, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_probe, m)?)?;
    Ok(())
}
