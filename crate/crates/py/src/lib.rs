//! Python bindings: radio fields, trajectory datasets, the KNN baseline,
//! the pipeline runner and its report.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trajloc_core::config::PipelineConfig;
use trajloc_core::error::Error;
use trajloc_core::localization::{self, EvalReport};
use trajloc_core::mobility::{self, FeatureConfig, MobilityConfig, TrajectoryDataset};
use trajloc_core::pipeline::{self, Report};
use trajloc_core::radio_sim::{self, ApDeployment, Point, PropagationParams, RadioField};

create_exception!(trajloc, TrajlocError, PyException);

fn py_err(e: Error) -> PyErr {
    TrajlocError::new_err(e.to_string())
}

/// Log-normal shadowing path loss in dB.
#[pyfunction]
#[pyo3(signature = (d, n=4.0, pl_d0=40.0, d0=1.0, chi=0.0))]
fn path_loss(d: f64, n: f64, pl_d0: f64, d0: f64, chi: f64) -> PyResult<f64> {
    let p = PropagationParams {
        n,
        pl_d0,
        d0,
        ..PropagationParams::default()
    };
    radio_sim::path_loss(d, &p, chi).map_err(py_err)
}

/// Nearest-rank percentile of `values`.
#[pyfunction]
fn percentile(mut values: Vec<f64>, p: u32) -> PyResult<f64> {
    if values.is_empty() {
        return Err(TrajlocError::new_err("percentile of an empty list"));
    }
    values.sort_by(f64::total_cmp);
    Ok(localization::percentile(&values, p))
}

#[pyclass(name = "Field", module = "trajloc")]
pub struct PyField(RadioField);

#[pymethods]
impl PyField {
    #[staticmethod]
    #[pyo3(signature = (width, height, spacing, aps, seed))]
    fn generate(width: f64, height: f64, spacing: f64, aps: usize, seed: u64) -> PyResult<Self> {
        let dep = ApDeployment::random(aps, width, height, PropagationParams::default(), seed);
        radio_sim::sample_field(&dep, width, height, spacing, seed).map(PyField).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RadioField::load(&path).map(PyField).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> f64 {
        self.0.width
    }

    #[getter]
    fn height(&self) -> f64 {
        self.0.height
    }

    #[getter]
    fn spacing(&self) -> f64 {
        self.0.spacing
    }

    /// Number of APs.
    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.rows, self.0.cols)
    }

    /// RSSI vector (dBm) at the grid point nearest to (x, y).
    fn rssi_at(&self, x: f64, y: f64) -> PyResult<Vec<f64>> {
        self.0.rssi_at(Point::new(x, y)).map(<[f64]>::to_vec).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Field(width={}, height={}, spacing={}, m={})",
            self.0.width, self.0.height, self.0.spacing, self.0.m
        )
    }
}

#[pyclass(name = "Dataset", module = "trajloc")]
pub struct PyDataset(TrajectoryDataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (field, count, labeled, seed, t=15))]
    fn generate(field: &PyField, count: usize, labeled: bool, seed: u64, t: usize) -> PyResult<Self> {
        let mc = MobilityConfig {
            t,
            ..MobilityConfig::default()
        };
        mobility::gen_dataset(&field.0, &mc, &FeatureConfig::default(), count, labeled, seed)
            .map(PyDataset)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        TrajectoryDataset::load(&path).map(PyDataset).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn m(&self) -> usize {
        self.0.m
    }

    #[getter]
    fn t(&self) -> usize {
        self.0.t
    }

    #[getter]
    fn labeled(&self) -> bool {
        self.0.labeled
    }

    /// Features of item `i` as `m` rows of `t` values in [0, 1].
    fn features(&self, i: usize) -> PyResult<Vec<Vec<f32>>> {
        let item = self.0.items.get(i).ok_or_else(|| TrajlocError::new_err(format!("index {i} out of range")))?;
        Ok((0..self.0.m).map(|a| item.features.row(a).to_vec()).collect())
    }

    /// Endpoint labels in meters, `None` for unlabeled items.
    fn labels(&self) -> Vec<Option<(f32, f32)>> {
        self.0.items.iter().map(|it| it.label.map(|[x, y]| (x, y))).collect()
    }

    fn strip_labels(&self) -> Self {
        PyDataset(self.0.strip_labels())
    }
}

fn eval_dict<'py>(py: Python<'py>, rep: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("cdf68", rep.cdf68)?;
    d.set_item("cdf95", rep.cdf95)?;
    d.set_item("errors", rep.errors.clone())?;
    let preds: Vec<(f32, f32)> = rep.predictions.iter().map(|p| (p[0], p[1])).collect();
    d.set_item("predictions", preds)?;
    Ok(d)
}

/// KNN over flattened trajectories; returns cdf68, cdf95, errors and predictions.
#[pyfunction]
#[pyo3(signature = (train, test, k=3))]
fn knn_baseline<'py>(py: Python<'py>, train: &PyDataset, test: &PyDataset, k: usize) -> PyResult<Bound<'py, PyDict>> {
    let rep = localization::knn_baseline(&train.0, &test.0, k).map_err(py_err)?;
    eval_dict(py, &rep)
}

fn report_rows<'py>(py: Python<'py>, rep: &Report) -> PyResult<Vec<Bound<'py, PyDict>>> {
    rep.rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("model", &r.model)?;
            d.set_item("crowdsourced_c", r.crowdsourced_c)?;
            d.set_item("delta", r.delta)?;
            d.set_item("train_size", r.train_size)?;
            d.set_item("cdf68", r.cdf68)?;
            d.set_item("cdf95", r.cdf95)?;
            d.set_item("sorted_errors", r.sorted_errors.clone())?;
            Ok(d)
        })
        .collect()
}

/// Run the pipeline described by a TOML config; returns the summary rows.
#[pyfunction]
#[pyo3(signature = (config_path, force=false, verbose=false))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    force: bool,
    verbose: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = PipelineConfig::load(&config_path).map_err(py_err)?;
    let summary = py
        .detach(|| {
            pipeline::run_pipeline(&cfg, force, &mut |line| {
                if verbose {
                    eprintln!("{line}");
                }
            })
        })
        .map_err(py_err)?;
    report_rows(py, &summary.report)
}

/// Summarize an artifact directory; returns (rows, warnings).
#[pyfunction]
fn report<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<(Vec<Bound<'py, PyDict>>, Vec<String>)> {
    let rep = pipeline::report(&dir).map_err(py_err)?;
    Ok((report_rows(py, &rep)?, rep.warnings.clone()))
}

#[pymodule]
fn trajloc(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TrajlocError", m.py().get_type::<TrajlocError>())?;
    m.add_class::<PyField>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(path_loss, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(knn_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
