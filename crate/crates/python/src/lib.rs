use std::path::PathBuf;

use lamp_core::cli::{cmd_sweep, ExperimentConfig};
use lamp_core::data::{load_mnist, load_mvtec_category, make_one_class_task, ColorMode, PreprocessOp};
use lamp_core::eval::{anomaly_scores, PatchAggregation};
use lamp_core::landscape::{loss_grid, random_direction, reconstruction_loss, sharpness_index, Normalization};
use lamp_core::losses::{amplify as amplify_op, training_loss};
use lamp_core::optim::train;
use lamp_core::{
    ADTask, AEConfig, AEModel, Error, Graph, LampConfig, LossSpec, OptimizerConfig, OptimizerKind, Parameterized,
    Reduction, Tensor, TrainConfig,
};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::ShapeMismatch { .. } => PyValueError::new_err(msg),
        Error::Io { .. } | Error::Data(_) | Error::Format(_) | Error::Csv(_) | Error::AnomalousTrainingSample { .. } => {
            PyOSError::new_err(msg)
        }
        Error::NonFinite { .. } | Error::NonPositiveLog { .. } => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn tensor(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, data).map_err(py_err)
}

/// Elementwise `-ln(1 - x)`.
#[pyfunction]
fn amplify(xs: Vec<f64>) -> PyResult<Vec<f64>> {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_vec(xs));
    let y = amplify_op(&mut g, x).map_err(py_err)?;
    Ok(g.value(y).data().to_vec())
}

/// Training loss between `y` and `y_hat`, both flat with the given NCHW shape.
#[pyfunction]
#[pyo3(signature = (y, y_hat, shape, spec="l2.lamp", epsilon=0.01, reduction="sum"))]
fn loss(y: Vec<f64>, y_hat: Vec<f64>, shape: Vec<usize>, spec: &str, epsilon: f64, reduction: &str) -> PyResult<f64> {
    let spec: LossSpec = parse(spec)?;
    let lamp = LampConfig::new(epsilon, parse::<Reduction>(reduction)?).map_err(py_err)?;
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new(shape.clone(), y).map_err(py_err)?);
    let b = g.input(Tensor::new(shape, y_hat).map_err(py_err)?);
    let l = training_loss(&mut g, a, b, spec, &lamp).map_err(py_err)?;
    Ok(g.value(l).data()[0])
}

/// Rank AUROC; labels are 1 for anomalous.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    lamp_core::auroc(&scores, &labels).map_err(py_err)
}

/// Runs (or resumes) a sweep from a JSON config; returns the per-seed rows.
#[pyfunction]
fn sweep(config_path: PathBuf) -> PyResult<Vec<(String, String, String, usize, u64, Option<f64>)>> {
    let text = std::fs::read_to_string(&config_path).map_err(|e| PyOSError::new_err(e.to_string()))?;
    let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let out = cmd_sweep(&cfg).map_err(py_err)?;
    Ok(out
        .rows
        .into_iter()
        .map(|r| (r.task, r.loss, r.optimizer, r.batch_size, r.seed, r.auroc))
        .collect())
}

/// One anomaly detection task: normal training images and a labeled test set.
#[pyclass(module = "lamp", frozen)]
struct Task {
    inner: ADTask,
}

#[pymethods]
impl Task {
    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    /// `(channels, height, width)`.
    #[getter]
    fn sample_shape(&self) -> (usize, usize, usize) {
        self.inner.train.sample_shape()
    }

    #[getter]
    fn train_len(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn test_len(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn test_labels(&self) -> Option<Vec<u8>> {
        self.inner.test.labels.clone()
    }

    /// Keeps the first `train` training and `test` test samples.
    #[pyo3(signature = (train=None, test=None))]
    fn head(&self, train: Option<usize>, test: Option<usize>) -> PyResult<Task> {
        let mut inner = self.inner.clone();
        if let Some(n) = train {
            inner.train = inner.train.take(n).map_err(py_err)?;
        }
        if let Some(n) = test {
            inner.test = inner.test.take(n).map_err(py_err)?;
        }
        Ok(Task { inner })
    }

    /// Flat test pixels and their NCHW shape.
    fn test_images(&self) -> (Vec<f32>, Vec<usize>) {
        let px = &self.inner.test.pixels;
        (px.data().to_vec(), px.shape().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Task({:?}, train={}, test={})", self.inner.name, self.train_len(), self.test_len())
    }
}

/// One-class MNIST task for `digit`, zero-padded to `pad_to`.
#[pyfunction]
#[pyo3(signature = (data_dir, digit, pad_to=Some(32)))]
fn mnist_task(data_dir: PathBuf, digit: u8, pad_to: Option<usize>) -> PyResult<Task> {
    let mnist = load_mnist(&data_dir).map_err(py_err)?;
    let mut inner = make_one_class_task(&mnist, digit).map_err(py_err)?;
    if let Some(p) = pad_to {
        inner = inner.preprocess(&[PreprocessOp::Pad { height: p, width: p }]).map_err(py_err)?;
    }
    Ok(Task { inner })
}

/// MVTec-style category folder resized to `size` x `size`.
#[pyfunction]
#[pyo3(signature = (root, category, size=256, color="rgb"))]
fn mvtec_task(root: PathBuf, category: &str, size: usize, color: &str) -> PyResult<Task> {
    let color = match color {
        "rgb" => ColorMode::Rgb,
        "gray" => ColorMode::Gray,
        other => return Err(PyValueError::new_err(format!("unknown color mode `{other}`"))),
    };
    let inner = load_mvtec_category(&root, category, (size, size), color).map_err(py_err)?;
    Ok(Task { inner })
}

/// Convolutional autoencoder in 32-bit floats.
#[pyclass(module = "lamp")]
struct Autoencoder {
    model: AEModel<f32>,
    lamp: LampConfig,
    spec: Option<LossSpec>,
}

#[pymethods]
impl Autoencoder {
    #[new]
    #[pyo3(signature = (depth=4, channels=1, size=32, base_width=None, patches=1, seed=0))]
    fn new(
        depth: usize,
        channels: usize,
        size: usize,
        base_width: Option<usize>,
        patches: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let mut cfg = AEConfig::new(depth, channels, (size, size));
        if let Some(w) = base_width {
            cfg.base_width = w;
        }
        cfg.patches = patches;
        let model = AEModel::build(cfg, seed).map_err(py_err)?;
        Ok(Autoencoder { model, lamp: LampConfig::default(), spec: None })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let model = AEModel::load(&path).map_err(py_err)?;
        Ok(Autoencoder { model, lamp: LampConfig::default(), spec: None })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.model.params().numel()
    }

    /// Trains on the task's normal images; returns the mean loss of every epoch.
    #[pyo3(signature = (task, loss="l2.lamp", optimizer="adam", lr=1e-3, epochs=20, batch_size=128, seed=0, epsilon=0.01, reduction="sum"))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        task: &Task,
        loss: &str,
        optimizer: &str,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        epsilon: f64,
        reduction: &str,
    ) -> PyResult<Vec<f64>> {
        let spec: LossSpec = parse(loss)?;
        let kind: OptimizerKind = parse(optimizer)?;
        let mut cfg = TrainConfig::new(spec, OptimizerConfig::new(kind, lr), epochs, batch_size, seed);
        cfg.lamp = LampConfig::new(epsilon, parse::<Reduction>(reduction)?).map_err(py_err)?;
        cfg.patches = self.model.config().patches;
        let model = &mut self.model;
        let history = py.detach(|| train(model, &task.inner.train, &cfg)).map_err(py_err)?;
        self.lamp = cfg.lamp;
        self.spec = Some(spec);
        Ok(history.epoch_losses)
    }

    /// AUROC of reconstruction-error scores on the task's test set.
    fn evaluate(&self, py: Python<'_>, task: &Task) -> PyResult<f64> {
        let model = &self.model;
        py.detach(|| lamp_core::evaluate_task(model, &task.inner, ""))
            .map(|r| r.auroc)
            .map_err(py_err)
    }

    /// Per-image anomaly scores for flat NCHW `images`.
    fn anomaly_scores(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        anomaly_scores(&self.model, &tensor(images, shape)?, PatchAggregation::Mean).map_err(py_err)
    }

    /// Eval-mode reconstruction of flat NCHW `images`.
    fn reconstruct(&self, images: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f32>> {
        let out = self.model.reconstruct(&tensor(images, shape)?).map_err(py_err)?;
        Ok(out.data().to_vec())
    }

    /// Sharpness of the 1-D filter-normalized landscape of the training loss
    /// on the first `samples` training images.
    #[pyo3(signature = (task, direction_seed=0, resolution=51, span=1.0, samples=256, loss=None))]
    fn sharpness(
        &self,
        py: Python<'_>,
        task: &Task,
        direction_seed: u64,
        resolution: usize,
        span: f64,
        samples: usize,
        loss: Option<&str>,
    ) -> PyResult<f64> {
        let spec = match (loss, self.spec) {
            (Some(s), _) => parse(s)?,
            (None, Some(s)) => s,
            (None, None) => return Err(PyValueError::new_err("untrained model: pass `loss`")),
        };
        let batch = task.inner.train.take(samples).map_err(py_err)?;
        let model = &self.model;
        let lamp = &self.lamp;
        py.detach(|| {
            let d = random_direction(model.params(), direction_seed, Normalization::Filter);
            let grid = loss_grid(model, &d, None, (-span, span), resolution, |m: &AEModel<f32>| {
                reconstruction_loss(m, &batch.pixels, spec, lamp)
            })?;
            sharpness_index(&grid)
        })
        .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = self.model.config();
        format!("Autoencoder(depth={}, base_width={}, params={})", c.depth, c.base_width, self.num_params())
    }
}

#[pymodule]
fn lamp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Autoencoder>()?;
    m.add_class::<Task>()?;
    m.add_function(wrap_pyfunction!(amplify, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(mnist_task, m)?)?;
    m.add_function(wrap_pyfunction!(mvtec_task, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    Ok(())
}
