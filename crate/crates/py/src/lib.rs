//! Python bindings: dataset generation, training, episodic evaluation and
//! attention inspection.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clta_core::attention::{self, FrameSequence, FusionMode};
use clta_core::classifiers::ClassifierKind;
use clta_core::episodic::EpisodeSpec;
use clta_core::error::CltaError;
use clta_core::io;
use clta_core::model::{AttentionKind, ProjectionStage};
use clta_core::numerics::Matrix;
use clta_core::pipeline::{self, GradCheckSetup, ModelOptions};
use clta_core::synth::{self, SynthConfig, SynthMode};
use clta_core::trainer::TrainConfig;

fn py_err(e: CltaError) -> PyErr {
    match e {
        CltaError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn sequence(frames: Vec<Vec<f64>>) -> PyResult<FrameSequence> {
    let m = Matrix::from_rows(&frames).map_err(py_err)?;
    FrameSequence::new(m, None, "py").map_err(py_err)
}

fn attention_kind(name: &str) -> PyResult<AttentionKind> {
    AttentionKind::ALL
        .into_iter()
        .find(|k| k.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown model `{name}`")))
}

fn classifier_kind(name: &str) -> PyResult<ClassifierKind> {
    match name {
        "softmax" => Ok(ClassifierKind::Softmax),
        "cosine" => Ok(ClassifierKind::Cosine),
        _ => Err(PyValueError::new_err(format!("unknown classifier `{name}`"))),
    }
}

/// A trained model together with its base-class names.
#[pyclass(name = "Model")]
struct PyModel {
    inner: clta_core::model::Model,
    class_names: Vec<String>,
}

#[pymethods]
impl PyModel {
    /// Loads a checkpoint and, when present, its `.labels` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = io::load_checkpoint(&path).map_err(py_err)?;
        let lp = io::labels_path(&path);
        let class_names = if lp.is_file() {
            io::read_labels(&lp).map_err(py_err)?
        } else {
            Vec::new()
        };
        Ok(PyModel { inner, class_names })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&path, &self.inner).map_err(py_err)?;
        if !self.class_names.is_empty() {
            io::write_labels(&io::labels_path(&path), &self.class_names).map_err(py_err)?;
        }
        Ok(())
    }

    #[getter]
    fn attention(&self) -> &'static str {
        self.inner.config.attention.name()
    }

    #[getter]
    fn z(&self) -> usize {
        self.inner.config.z
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.config.dim
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.class_names.clone()
    }

    /// Video descriptor fed to few-shot heads; `frames` is a `T x d` list of rows.
    fn embed(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.embed(&sequence(frames)?).map_err(py_err)
    }

    fn logits(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&sequence(frames)?).map_err(py_err)?.0)
    }

    fn predict(&self, frames: Vec<Vec<f64>>) -> PyResult<usize> {
        self.inner.predict(&sequence(frames)?).map_err(py_err)
    }

    /// Attention curves as a dict with keys `mu`, `sigma`, `a`, `e`.
    fn trace<'py>(&self, py: Python<'py>, frames: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let tr = self.inner.trace(&sequence(frames)?).map_err(py_err)?;
        let rows = |m: &Matrix| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>();
        let d = PyDict::new(py);
        d.set_item("mu", tr.mu.clone())?;
        d.set_item("sigma", tr.sigma.clone())?;
        d.set_item("a", rows(&tr.raw))?;
        d.set_item("e", rows(&tr.norm))?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(attention={}, k={}, dim={}, z={}, classes={})",
            c.attention.name(),
            c.k,
            c.dim,
            c.z,
            c.num_classes
        )
    }
}

/// Expected 1-based index under `softmax(beta * scores)`.
#[pyfunction]
fn soft_argmax(scores: Vec<f64>, beta: f64) -> PyResult<f64> {
    attention::soft_argmax(&scores, beta).map_err(py_err)
}

/// Writes a synthetic dataset to `out_dir` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, mode = "instance_shifted", amp = 3.0, noise = 1.0, classes = 30, videos_per_class = 30, seed = 0))]
fn generate(
    out_dir: PathBuf,
    mode: &str,
    amp: f64,
    noise: f64,
    classes: usize,
    videos_per_class: usize,
    seed: u64,
) -> PyResult<PathBuf> {
    let cfg = SynthConfig {
        mode: SynthMode::parse(mode).map_err(py_err)?,
        signal_amp: amp,
        noise_std: noise,
        num_classes: classes,
        videos_per_class,
        seed,
        ..SynthConfig::default()
    };
    let ds = synth::generate(&cfg).map_err(py_err)?;
    io::save_dataset(&ds.dataset, &out_dir).map_err(py_err)
}

/// Trains on the manifest's train split; returns the model and the per-epoch log.
#[pyfunction]
#[pyo3(signature = (manifest, model = "clta", classifier = "softmax", k = 6, beta = 1e3, soft_fusion = false, hidden = 64, epochs = 20, batch_size = 32, lr = 1e-3, dropout = 0.9, val_episodes = 100, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    model: &str,
    classifier: &str,
    k: usize,
    beta: f64,
    soft_fusion: bool,
    hidden: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    dropout: f64,
    val_episodes: usize,
    seed: u64,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let ds = io::load_dataset(&manifest).map_err(py_err)?;
    let opts = ModelOptions {
        attention: attention_kind(model)?,
        k,
        beta,
        fusion: if soft_fusion { FusionMode::SoftWeight } else { FusionMode::Average },
        classifier: classifier_kind(classifier)?,
        hidden,
        projection_stage: ProjectionStage::Post,
        batch_norm: false,
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr0: lr,
        dropout_rate: dropout,
        seed,
        ..TrainConfig::default()
    };
    let val = (val_episodes > 0).then(|| {
        pipeline::validation_spec(
            &EpisodeSpec {
                seed,
                ..EpisodeSpec::default()
            },
            val_episodes,
        )
    });
    let trained = py
        .detach(|| pipeline::train_model(&ds, &opts, &cfg, val.as_ref()))
        .map_err(py_err)?;
    let log = trained
        .log
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("lr", e.lr)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("train_acc", e.train_acc)?;
            d.set_item("val_acc", e.val_acc)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((
        PyModel {
            inner: trained.model,
            class_names: trained.class_names,
        },
        log,
    ))
}

/// Few-shot accuracy on the test split as `(mean_acc, ci95)`.
#[pyfunction]
#[pyo3(signature = (model, manifest, n_way = 5, k_shot = 5, episodes = 600, seed = 0))]
fn evaluate(
    py: Python<'_>,
    model: &PyModel,
    manifest: PathBuf,
    n_way: usize,
    k_shot: usize,
    episodes: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let ds = io::load_dataset(&manifest).map_err(py_err)?;
    let spec = EpisodeSpec {
        n_way,
        k_shot,
        num_episodes: episodes,
        seed,
        ..EpisodeSpec::default()
    };
    let s = py
        .detach(|| pipeline::evaluate(&model.inner, &ds, &spec))
        .map_err(py_err)?;
    Ok((s.mean_acc, s.ci95))
}

/// Maximum relative error between analytic and numeric gradients.
#[pyfunction]
#[pyo3(signature = (seed = 0, eps = 1e-6))]
fn gradcheck(seed: u64, eps: f64) -> PyResult<f64> {
    let setup = GradCheckSetup {
        eps,
        ..GradCheckSetup::default()
    };
    Ok(pipeline::gradcheck(seed, &setup).map_err(py_err)?.max_rel_error)
}

#[pymodule]
fn clta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(soft_argmax, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
