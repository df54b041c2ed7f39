//! Python bindings: model loading and forward passes with tap capture, the
//! regression statistics, and the full pipeline.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cnnxray::cli::stages;
use cnnxray::cli::RunConfig;
use cnnxray::model::fixtures;
use cnnxray::stats::{self, CorrelationBasis, DesignMatrix};
use cnnxray::{Error, Shape4, Tensor};

create_exception!(cnnxray_py, CnnxrayError, PyException);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Config(_) | Error::ShapeMismatch(_) => PyValueError::new_err(e.to_string()),
        other => CnnxrayError::new_err(other.to_string()),
    }
}

/// A loaded model graph.
#[pyclass(frozen, module = "cnnxray_py")]
struct Model {
    graph: cnnxray::ModelGraph,
}

#[pymethods]
impl Model {
    #[new]
    fn new(manifest: PathBuf, weights: PathBuf) -> PyResult<Self> {
        let m = stages::load_model_files(&manifest, &weights).map_err(to_py)?;
        Ok(Self { graph: m.graph })
    }

    #[getter]
    fn input_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.graph.input_shape();
        (c, h, w)
    }

    #[getter]
    fn taps(&self) -> Vec<String> {
        self.graph.taps().iter().map(|t| t.id.clone()).collect()
    }

    /// `(layer, kind, filters, height, width)` per layer.
    fn shapes(&self) -> PyResult<Vec<(String, String, usize, usize, usize)>> {
        Ok(self
            .graph
            .validate_shapes()
            .map_err(to_py)?
            .into_iter()
            .map(|r| (r.layer, r.kind.as_str().to_string(), r.channels, r.height, r.width))
            .collect())
    }

    /// Runs one sample given as a flat `c*h*w` list. Returns the model
    /// probability and, per tap, `(shape, flat values, probe probability)`.
    fn forward<'py>(&self, py: Python<'py>, values: Vec<f32>) -> PyResult<(f64, Bound<'py, PyDict>)> {
        let [c, h, w] = self.graph.input_shape();
        let x = Tensor::new(Shape4::new(1, c, h, w), values).map_err(to_py)?;
        let taps = self.graph.taps().to_vec();
        let (p, store) = py.detach(|| self.graph.forward(&x, &taps)).map_err(to_py)?;
        let out = PyDict::new(py);
        for tap in &taps {
            let t = store.get(&tap.id).ok_or_else(|| to_py(Error::MissingTap(tap.id.clone())))?;
            let probe = cnnxray::probe_forward(&self.graph, &tap.id, &store).map_err(to_py)?;
            let s = t.shape();
            out.set_item(&tap.id, ((s.n, s.c, s.h, s.w), t.data().to_vec(), probe))?;
        }
        Ok((p, out))
    }
}

fn design(x: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<DesignMatrix> {
    DesignMatrix::from_rows(&x, y).map_err(to_py)
}

/// Ridge fit with an unpenalised intercept: `(intercept, coefficients)`.
#[pyfunction]
#[pyo3(signature = (x, y, alpha = stats::DEFAULT_ALPHA))]
fn ridge_fit(x: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64) -> PyResult<(f64, Vec<f64>)> {
    let f = stats::ridge_fit(&design(x, y)?, alpha).map_err(to_py)?;
    Ok((f.intercept, f.coefficients))
}

/// Fit plus diagnostics as a dict.
#[pyfunction]
#[pyo3(signature = (x, y, alpha = stats::DEFAULT_ALPHA))]
fn diagnose<'py>(py: Python<'py>, x: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyDict>> {
    let d = design(x, y)?;
    let f = stats::ridge_fit(&d, alpha).map_err(to_py)?;
    let g = stats::diagnose(&f, &d).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("intercept", f.intercept)?;
    out.set_item("coefficients", f.coefficients)?;
    out.set_item("r_squared", g.r_squared)?;
    out.set_item("r_squared_raw", g.r_squared_raw)?;
    out.set_item("se", g.se)?;
    out.set_item("t_values", g.t_values)?;
    out.set_item("p_values", g.p_values)?;
    out.set_item("dof", g.dof)?;
    out.set_item("residual_variance", g.residual_variance)?;
    out.set_item("flags", g.flags)?;
    Ok(out)
}

#[pyfunction]
fn student_t_two_sided(t: f64, dof: u64) -> f64 {
    stats::student_t_two_sided(t, dof)
}

/// `(r, degenerate)`.
#[pyfunction]
fn pearson(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, bool)> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(stats::pearson(&a, &b))
}

#[pyfunction]
fn normalize_for_display<'py>(py: Python<'py>, values: Vec<f32>) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &stats::normalize_for_display(&values))
}

/// `(top_positive, top_negative)`, each a list of `(filter, coefficient)`.
#[pyfunction]
#[pyo3(signature = (coefficients, k = stats::DEFAULT_K))]
fn rank_filters(coefficients: Vec<f64>, k: usize) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let r = stats::rank_filters("", &coefficients, k);
    let pairs = |v: Vec<stats::RankedFilter>| v.into_iter().map(|f| (f.filter, f.coefficient)).collect();
    (pairs(r.top_positive), pairs(r.top_negative))
}

/// Writes a built-in model (`alexnet`, `resnet` or `planted`).
#[pyfunction]
#[pyo3(signature = (kind, out, seed = 0))]
fn write_fixture(kind: &str, out: PathBuf, seed: u64) -> PyResult<()> {
    let f = match kind {
        "alexnet" => fixtures::alexnet(seed),
        "resnet" => fixtures::resnet(seed),
        "planted" => fixtures::planted(&fixtures::PlantedConfig::default(), seed),
        _ => return Err(PyValueError::new_err(format!("unknown fixture `{kind}`"))),
    };
    std::fs::create_dir_all(&out).map_err(|e| PyOSError::new_err(e.to_string()))?;
    f.write_to(&out).map_err(to_py)
}

/// Writes the synthetic square/no-square image set.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, count = 200))]
fn write_synthetic_images(out: PathBuf, seed: u64, count: usize) -> PyResult<()> {
    fixtures::write_planted_images(&fixtures::PlantedConfig::default(), seed, count, &out).map_err(to_py)
}

/// Runs the whole pipeline and returns the bundle directory.
#[pyfunction]
#[pyo3(signature = (model, weights, data, out, alpha = stats::DEFAULT_ALPHA, k = stats::DEFAULT_K, taps = None, basis = "probe", seed = 0, split = (0.70, 0.15, 0.15), render = false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    model: PathBuf,
    weights: PathBuf,
    data: PathBuf,
    out: PathBuf,
    alpha: f64,
    k: usize,
    taps: Option<String>,
    basis: &str,
    seed: u64,
    split: (f64, f64, f64),
    render: bool,
) -> PyResult<PathBuf> {
    let basis = match basis {
        "probe" | "probe_outputs" => CorrelationBasis::ProbeOutputs,
        "coef" | "coefficient_vectors" => CorrelationBasis::CoefficientVectors,
        _ => return Err(PyValueError::new_err(format!("unknown basis `{basis}`"))),
    };
    let cfg = RunConfig {
        model,
        weights,
        data,
        out,
        alpha,
        k,
        taps,
        basis,
        split: [split.0, split.1, split.2],
        seed,
        render,
    };
    py.detach(|| stages::run_pipeline(&cfg)).map_err(to_py)
}

/// Paths in a bundle whose content no longer matches `bundle.json`.
#[pyfunction]
fn verify_bundle(dir: PathBuf) -> PyResult<Vec<String>> {
    cnnxray::report::verify_bundle(&dir).map_err(to_py)
}

#[pymodule]
fn cnnxray_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CnnxrayError", m.py().get_type::<CnnxrayError>())?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(ridge_fit, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_function(wrap_pyfunction!(student_t_two_sided, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_for_display, m)?)?;
    m.add_function(wrap_pyfunction!(rank_filters, m)?)?;
    m.add_function(wrap_pyfunction!(write_fixture, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_images, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bundle, m)?)?;
    Ok(())
}
