use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pah::autodiff::Primitive;
use pah::battery::run_battery;
use pah::checkpoint;
use pah::config::{RunConfig, SweepAxis};
use pah::harness::{eval_checkpoint, train_run};
use pah::metrics::{self, AccuracyMatrix};
use pah::model::PahModel;
use pah::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Config { .. }
        | Error::Metric(_)
        | Error::Shape { .. }
        | Error::UnknownTask(_)
        | Error::Label { .. } => PyValueError::new_err(err.to_string()),
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => {
            PyIOError::new_err(err.to_string())
        }
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn matrix_rows(m: &AccuracyMatrix) -> Vec<Vec<f64>> {
    (1..=m.tasks()).filter_map(|l| m.row(l)).collect()
}

/// Run configuration in `key = value` form.
#[pyclass(name = "RunConfig", module = "pah_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    /// Copy with one ablation axis set to `value`.
    fn with_axis(&self, axis: &str, value: &str) -> PyResult<Self> {
        let axis = SweepAxis::parse(axis)
            .ok_or_else(|| PyValueError::new_err(format!("unknown sweep axis `{axis}`")))?;
        Ok(PyRunConfig {
            inner: self.inner.with_axis(axis, value).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.dataset.num_tasks
    }

    #[getter]
    fn classes_per_task(&self) -> usize {
        self.inner.dataset.classes_per_task
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(num_tasks={}, classes_per_task={}, epochs={}, seed={})",
            self.inner.dataset.num_tasks,
            self.inner.dataset.classes_per_task,
            self.inner.train.epochs,
            self.inner.train.seed
        )
    }
}

/// Backbone, hypernetwork and prototype bank restored from a checkpoint.
#[pyclass(name = "Model", module = "pah_py")]
struct PyModel {
    inner: PahModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_tasks(&self) -> usize {
        self.inner.prototypes.num_tasks()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// `(channels, height, width)` expected per image.
    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.dims.input;
        (s.channels, s.height, s.width)
    }

    /// Logits of head `task` for standardized images flattened row-major
    /// into `images`; returns one row per image.
    fn logits(&self, py: Python<'_>, images: Vec<f64>, task: usize) -> PyResult<Vec<Vec<f64>>> {
        let model = &self.inner;
        let t = py.detach(|| model.logits(&images, task)).map_err(to_py)?;
        let cols = *t.shape().last().unwrap_or(&1);
        Ok(t.data().chunks(cols.max(1)).map(<[f64]>::to_vec).collect())
    }
}

/// Trains the full sequence into `out_dir` and returns the run record.
#[pyfunction]
#[pyo3(signature = (config, out_dir, echo = false))]
fn train<'py>(
    py: Python<'py>,
    config: &PyRunConfig,
    out_dir: PathBuf,
    echo: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let record = py
        .detach(|| train_run(&cfg, &out_dir, echo))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("matrix", matrix_rows(&record.matrix))?;
    d.set_item("average_accuracy", record.average_accuracy)?;
    d.set_item("forgetting", record.forgetting)?;
    d.set_item("forgetting_defined", record.forgetting_defined)?;
    d.set_item("steps", record.steps)?;
    d.set_item("wallclock_s", record.wallclock_s)?;
    d.set_item("checkpoint_bytes", record.checkpoint_bytes)?;
    d.set_item("version", record.version)?;
    Ok(d)
}

/// Per-task accuracy of a checkpoint on the test splits of `config`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    config: &PyRunConfig,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let report = py
        .detach(|| eval_checkpoint(&checkpoint, &cfg))
        .map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("accuracies", report.accuracies)?;
    d.set_item("average_accuracy", report.average_accuracy)?;
    Ok(d)
}

/// Mean of the final row of a lower-triangular accuracy matrix.
#[pyfunction]
fn average_accuracy(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = AccuracyMatrix::from_rows(&rows).map_err(to_py)?;
    metrics::average_accuracy(&m).map_err(to_py)
}

/// Mean drop from each earlier task's best accuracy to its final one.
#[pyfunction]
fn forgetting(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = AccuracyMatrix::from_rows(&rows).map_err(to_py)?;
    metrics::forgetting(&m).map_err(to_py)
}

/// Finite-difference battery as `(name, max_error, threshold, passed)`.
#[pyfunction]
#[pyo3(signature = (inject_fault = None))]
fn gradcheck(
    py: Python<'_>,
    inject_fault: Option<&str>,
) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let fault = inject_fault
        .map(|n| {
            Primitive::from_name(n)
                .ok_or_else(|| PyValueError::new_err(format!("unknown primitive `{n}`")))
        })
        .transpose()?;
    let results = py.detach(|| run_battery(fault)).map_err(to_py)?;
    Ok(results
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.max_error, r.threshold, passed)
        })
        .collect())
}

#[pymodule]
fn pah_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(average_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
