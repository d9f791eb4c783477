//! Python bindings: datasets, checkpoints, training, evaluation and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use robometa::datagen::{self, GenerationJob, Preset, SignalFamily};
use robometa::eval::{self, Approach, EvalConfig};
use robometa::model::{self, TransformerConfig};
use robometa::train::{self, TrainConfig};
use robometa::{ErrorCategory, Result as RmResult};

fn py_err(e: robometa::Error) -> PyErr {
    match e.category() {
        ErrorCategory::Config => PyValueError::new_err(e.to_string()),
        ErrorCategory::Data => PyIOError::new_err(e.to_string()),
        ErrorCategory::Numeric => PyArithmeticError::new_err(e.to_string()),
    }
}

fn lift<T>(r: RmResult<T>) -> PyResult<T> {
    r.map_err(py_err)
}

fn json_to_py(py: Python<'_>, value: &impl serde::Serialize) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import_bound("json")?.call_method1("loads", (text,))?.unbind())
}

fn rows(flat: &[f32], width: usize) -> Vec<Vec<f32>> {
    flat.chunks(width).map(|r| r.to_vec()).collect()
}

fn flatten(rows: &[Vec<f32>], width: usize, what: &str) -> PyResult<Vec<f32>> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!("{what}: expected rows of {width}, got {}", r.len())));
    }
    Ok(rows.concat())
}

/// Kept trajectories with their normalization statistics.
#[pyclass(module = "robometa_py")]
#[derive(Clone)]
pub struct Dataset {
    inner: datagen::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: lift(datagen::load_dataset(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lift(datagen::save_dataset(&self.inner, &path))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }

    #[getter]
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }

    #[getter]
    fn robot_indices(&self) -> Vec<u32> {
        self.inner.records.iter().map(|r| r.params.index).collect()
    }

    #[getter]
    fn blacklisted(&self) -> usize {
        self.inner.manifest.num_blacklisted
    }

    fn fingerprint(&self) -> String {
        self.inner.stats().fingerprint()
    }

    /// `(u, y)` of the record at `position`, as lists of rows.
    fn trajectory(&self, position: usize) -> PyResult<(Vec<Vec<f32>>, Vec<Vec<f32>>)> {
        let r = self
            .inner
            .records
            .get(position)
            .ok_or_else(|| PyValueError::new_err(format!("position {position} out of range")))?;
        let t = &r.trajectory;
        Ok((rows(&t.u, t.n_u), rows(&t.y, t.n_y)))
    }

    /// Record positions of the training and validation splits.
    fn split(&self) -> (Vec<usize>, Vec<usize>) {
        self.inner.split_indices()
    }

    fn subset(&self, positions: Vec<usize>) -> PyResult<Self> {
        if let Some(p) = positions.iter().find(|p| **p >= self.inner.len()) {
            return Err(PyValueError::new_err(format!("position {p} out of range")));
        }
        Ok(Dataset {
            inner: self.inner.subset(&positions),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(robots={}, steps={}, n_u={}, n_y={})",
            self.inner.len(),
            self.inner.n_steps(),
            self.inner.n_u(),
            self.inner.n_y()
        )
    }
}

/// Trained model with its normalization statistics.
#[pyclass(module = "robometa_py")]
#[derive(Clone)]
pub struct Checkpoint {
    inner: model::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: lift(model::load_checkpoint(&path))?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        lift(model::save_checkpoint(&self.inner, &path))
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn train_context(&self) -> usize {
        self.inner.train_context
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.config().param_count()
    }

    fn config(&self, py: Python<'_>) -> PyResult<PyObject> {
        json_to_py(py, self.inner.config())
    }

    /// Predicts outputs for `u_query` given a physical-unit context.
    fn simulate(&self, u_ctx: Vec<Vec<f32>>, y_ctx: Vec<Vec<f32>>, u_query: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f64>>> {
        let c = self.inner.config();
        let sim = lift(model::simulate(
            &self.inner,
            &flatten(&u_ctx, c.n_u, "u_ctx")?,
            &flatten(&y_ctx, c.n_y, "y_ctx")?,
            &flatten(&u_query, c.n_u, "u_query")?,
            None,
        ))?;
        Ok(sim.y.chunks(c.n_y).map(|r| r.to_vec()).collect())
    }
}

#[pyfunction]
#[pyo3(signature = (robots, steps, family = "multisin", seed = 0, preset = "default"))]
fn generate(robots: usize, steps: usize, family: &str, seed: u64, preset: &str) -> PyResult<Dataset> {
    let mut job = GenerationJob {
        num_robots: robots,
        timesteps: steps,
        family: lift(family.parse::<SignalFamily>())?,
        ..Default::default()
    };
    job.randomization = job.randomization.with_preset(lift(preset.parse::<Preset>())?);
    job.randomization.seed = seed;
    Ok(Dataset {
        inner: lift(datagen::generate(&job))?,
    })
}

/// Trains a model and returns it with the per-step training losses.
#[pyfunction]
#[pyo3(signature = (dataset, steps, batch = 16, layers = 4, d_model = 128, heads = 4, d_ff = 512,
                    lr = 3e-4, warmup = 200, context_fraction = 0.2, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_model(
    py: Python<'_>,
    dataset: &Dataset,
    steps: u64,
    batch: usize,
    layers: usize,
    d_model: usize,
    heads: usize,
    d_ff: usize,
    lr: f64,
    warmup: u64,
    context_fraction: f64,
    seed: u64,
) -> PyResult<(Checkpoint, Vec<f64>)> {
    let cfg = TrainConfig {
        batch_robots: batch,
        max_steps: steps,
        peak_lr: lr,
        min_lr: lr / 10.0,
        warmup_steps: warmup,
        context_fraction,
        seed,
        eval_every: 0,
        ..Default::default()
    };
    let base = TransformerConfig {
        n_layers_encoder: layers,
        n_layers_decoder: layers,
        d_model,
        n_heads: heads,
        d_ff,
        seed,
        ..Default::default()
    };
    let ds = &dataset.inner;
    let out = py.allow_threads(|| {
        let model = train::model_config_for(ds, context_fraction, &base)?;
        train::train(ds, model, &cfg)
    });
    let out = lift(out)?;
    Ok((Checkpoint { inner: out.last }, out.log.losses()))
}

/// Metrics report as a dict.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, approach = "A", context_fraction = 0.2, horizon = None))]
fn evaluate(
    py: Python<'_>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    approach: &str,
    context_fraction: f64,
    horizon: Option<usize>,
) -> PyResult<PyObject> {
    let cfg = EvalConfig {
        context_fractions: vec![context_fraction],
        horizons: horizon.into_iter().collect(),
        approach: lift(approach.parse::<Approach>())?,
        ..Default::default()
    };
    let report = lift(py.allow_threads(|| eval::evaluate(&checkpoint.inner, &dataset.inner, &cfg)))?;
    json_to_py(py, &report)
}

/// `{"r2", "rmse", "nrmse", "fi"}` for one series; undefined entries are None.
#[pyfunction]
fn metrics(py: Python<'_>, y: Vec<f64>, yhat: Vec<f64>) -> PyResult<Py<PyDict>> {
    let m = lift(eval::CoordMetrics::compute(&y, &yhat))?;
    let d = PyDict::new_bound(py);
    d.set_item("r2", m.r2)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("nrmse", m.nrmse)?;
    d.set_item("fi", m.fi)?;
    d.set_item("band", m.band().map(|b| b.label()))?;
    Ok(d.unbind())
}

/// `(name, max_rel_error, tolerance, passed)` for every gradient check.
#[pyfunction]
fn gradcheck() -> PyResult<Vec<(String, f64, f64, bool)>> {
    let mut results = lift(robometa::tensor::gradcheck::primitive_suite())?;
    results.push(lift(model::end_to_end_gradcheck(5))?);
    Ok(results
        .into_iter()
        .map(|r| {
            let passed = r.passed();
            (r.name, r.max_rel_error, r.tolerance, passed)
        })
        .collect())
}

#[pymodule]
pub fn robometa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
