//! Python bindings: `import dlfm`.

use dlfm_core::experiments::{self, ExperimentName};
use dlfm_core::{DlfmError, FactorMatrix, Labels, LossAtom, LossMatrix};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: DlfmError) -> PyErr {
    match e {
        DlfmError::SubsolverFailure { .. } | DlfmError::RunFailure { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn loss_atom(name: &str, delta: Option<f64>, order: Option<f64>) -> PyResult<LossAtom> {
    Ok(match name {
        "square" => LossAtom::square(),
        "squared_distance" => LossAtom::squared_distance(),
        "huber" => LossAtom::huber(delta.unwrap_or(1.0)),
        "lp" => LossAtom::lp(order.unwrap_or(1.0)),
        "binary_logit" => LossAtom::binary_logit(),
        "multinomial_logit" => LossAtom::multinomial_logit(),
        other => return Err(PyValueError::new_err(format!("unknown loss `{other}`"))),
    })
}

fn factor_matrix(rows: Vec<Vec<f64>>) -> PyResult<FactorMatrix> {
    FactorMatrix::from_rows(&rows).map_err(to_py)
}

fn rows_of(z: &FactorMatrix) -> Vec<Vec<f64>> {
    (0..z.rows()).map(|i| z.row(i).to_vec()).collect()
}

/// Model specification. Build with a loss name or from JSON.
#[pyclass(name = "ModelSpec", from_py_object)]
#[derive(Clone)]
struct PyModelSpec {
    inner: dlfm_core::ModelSpec,
}

#[pymethods]
impl PyModelSpec {
    #[new]
    #[pyo3(signature = (k, n, loss = "square", delta = None, order = None))]
    fn new(k: usize, n: usize, loss: &str, delta: Option<f64>, order: Option<f64>) -> PyResult<Self> {
        Ok(PyModelSpec { inner: dlfm_core::ModelSpec::new(k, n, loss_atom(loss, delta, order)?) })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text)
            .map(|inner| PyModelSpec { inner })
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("serializable")
    }

    /// Constraint atoms as JSON, applied to every factor.
    fn with_constraints_json(&self, text: &str) -> PyResult<Self> {
        let atoms = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModelSpec { inner: self.inner.clone().with_shared_constraints(atoms) })
    }

    /// Regularizer atom as JSON; placed on the parameter or factor side by kind.
    fn with_regularizer_json(&self, text: &str) -> PyResult<Self> {
        let reg: dlfm_core::RegularizerAtom =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner = if reg.is_parameter_side() {
            self.inner.clone().with_p_regularizer(reg)
        } else {
            self.inner.clone().with_f_regularizer(reg)
        };
        Ok(PyModelSpec { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.controls.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.controls.seed = v;
    }

    #[getter]
    fn restarts(&self) -> usize {
        self.inner.controls.restarts
    }

    #[setter]
    fn set_restarts(&mut self, v: usize) {
        self.inner.controls.restarts = v;
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.inner.controls.eps
    }

    #[setter]
    fn set_eps(&mut self, v: f64) {
        self.inner.controls.eps = v;
    }

    #[getter]
    fn max_iter(&self) -> usize {
        self.inner.controls.max_iter
    }

    #[setter]
    fn set_max_iter(&mut self, v: usize) {
        self.inner.controls.max_iter = v;
    }

    fn __repr__(&self) -> String {
        format!("ModelSpec(k={}, n={})", self.inner.k, self.inner.n)
    }
}

/// Samples with row-major flattened features.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: dlfm_core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// `observations` is a list of floats or a list of equal-length lists.
    #[new]
    #[pyo3(signature = (features, observations, rows = 1, ordered = false))]
    fn new(features: Vec<Vec<f64>>, observations: &Bound<'_, PyAny>, rows: usize, ordered: bool) -> PyResult<Self> {
        let obs: Vec<Vec<f64>> = match observations.extract::<Vec<f64>>() {
            Ok(v) => v.into_iter().map(|y| vec![y]).collect(),
            Err(_) => observations.extract()?,
        };
        let m = features.len();
        if obs.len() != m {
            return Err(PyValueError::new_err(format!("{m} feature rows but {} observations", obs.len())));
        }
        let width = features.first().map_or(0, |f| f.len());
        if rows == 0 || width % rows != 0 {
            return Err(PyValueError::new_err(format!("feature length {width} is not a multiple of rows = {rows}")));
        }
        let p = obs.first().map_or(1, |o| o.len());
        let inner = dlfm_core::Dataset::new(
            m,
            rows,
            width / rows,
            features.into_iter().flatten().collect(),
            p,
            obs.into_iter().flatten().collect(),
        )
        .map_err(to_py)?
        .ordered(ordered);
        Ok(PyDataset { inner })
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        (0..self.inner.m()).map(|i| self.inner.feature(i).to_vec()).collect()
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.inner.m()).map(|i| self.inner.observation(i).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.m()
    }
}

#[pyclass(name = "FitResult", from_py_object)]
#[derive(Clone)]
struct PyFitResult {
    inner: dlfm_core::FitResult,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn thetas(&self) -> Vec<Vec<f64>> {
        self.inner.thetas.clone()
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.z)
    }

    /// 1-based factor labels.
    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.0.clone()
    }

    #[getter]
    fn objective(&self) -> f64 {
        self.inner.objective
    }

    /// `(iteration, after_p, after_f)` per BCD iteration.
    #[getter]
    fn objective_trace(&self) -> Vec<(usize, f64, f64)> {
        self.inner.objective_trace.iter().map(|t| (t.iteration, t.after_p, t.after_f)).collect()
    }

    #[getter]
    fn status(&self) -> String {
        serde_json::to_value(self.inner.status).expect("serializable").as_str().unwrap_or_default().to_string()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn restart_index_of_best(&self) -> usize {
        self.inner.restart_index_of_best
    }

    #[getter]
    fn seed_used(&self) -> u64 {
        self.inner.seed_used
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("serializable")
    }

    fn __repr__(&self) -> String {
        format!("FitResult(objective={}, iterations={}, status={})", self.inner.objective, self.inner.iterations, self.status())
    }
}

/// Best of `spec.restarts` block coordinate descent runs.
#[pyfunction]
fn fit(py: Python<'_>, spec: &PyModelSpec, data: &PyDataset) -> PyResult<PyFitResult> {
    let (spec, data) = (spec.inner.clone(), data.inner.clone());
    py.detach(move || dlfm_core::fit(&spec, &data)).map(|inner| PyFitResult { inner }).map_err(to_py)
}

/// Violations as `"path: message"` strings; empty when the model is valid.
#[pyfunction]
fn validate(spec: &PyModelSpec, data: &PyDataset) -> Vec<String> {
    dlfm_core::validate(&spec.inner, &data.inner)
        .violations
        .iter()
        .map(|v| format!("{}: {}", v.path, v.message))
        .collect()
}

#[pyfunction]
fn objective(spec: &PyModelSpec, data: &PyDataset, thetas: Vec<Vec<f64>>, z: Vec<Vec<f64>>) -> PyResult<f64> {
    Ok(dlfm_core::objective(&spec.inner, &data.inner, &thetas, &factor_matrix(z)?))
}

#[pyfunction]
#[pyo3(signature = (loss, x, y, theta, rows = 1, delta = None, order = None))]
fn loss_eval(
    loss: &str,
    x: Vec<f64>,
    y: Vec<f64>,
    theta: Vec<f64>,
    rows: usize,
    delta: Option<f64>,
    order: Option<f64>,
) -> PyResult<f64> {
    dlfm_core::loss_eval(&loss_atom(loss, delta, order)?, &x, rows, &y, &theta).map_err(to_py)
}

#[pyfunction]
fn solve_f_plain(losses: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let r = LossMatrix::from_rows(&losses).map_err(to_py)?;
    Ok(rows_of(&dlfm_core::solve_f_plain(&r)))
}

#[pyfunction]
fn solve_f_kl(losses: Vec<Vec<f64>>, weight: f64, init: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, f64)> {
    let r = LossMatrix::from_rows(&losses).map_err(to_py)?;
    let out = dlfm_core::solve_f_kl(&r, weight, &factor_matrix(init)?).map_err(to_py)?;
    Ok((rows_of(&out.z), out.objective))
}

#[pyfunction]
fn harden(z: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(dlfm_core::harden(&factor_matrix(z)?).0)
}

/// `(optimum, labels, thetas)` by exhaustive enumeration.
#[pyfunction]
fn brute_force_fit(spec: &PyModelSpec, data: &PyDataset) -> PyResult<(f64, Vec<usize>, Vec<Vec<f64>>)> {
    let res = dlfm_core::brute_force_fit(&spec.inner, &data.inner).map_err(to_py)?;
    Ok((res.optimum, res.best_assignment.0, res.thetas_at_optimum))
}

/// `(accuracy, permutation)`; the permutation maps predicted to true labels.
#[pyfunction]
fn aligned_accuracy(pred: Vec<usize>, truth: Vec<usize>, k: usize) -> PyResult<(f64, Vec<usize>)> {
    experiments::aligned_accuracy(&Labels(pred), &Labels(truth), k).map_err(to_py)
}

#[pyfunction]
fn estimate_transition(labels: Vec<usize>, k: usize) -> PyResult<Vec<Vec<f64>>> {
    experiments::estimate_transition(&Labels(labels), k).map_err(to_py)
}

/// Default dataset of a built-in experiment: `(data, labels, thetas)`.
#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn generate(name: &str, seed: u64) -> PyResult<(PyDataset, Option<Vec<usize>>, Option<Vec<Vec<f64>>>)> {
    let name: ExperimentName = name.parse().map_err(to_py)?;
    let syn = experiments::generate(&name.default_config(seed)).map_err(to_py)?;
    Ok((PyDataset { inner: syn.data }, syn.labels.map(|l| l.0), syn.thetas))
}

#[pymodule]
fn dlfm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(objective, m)?)?;
    m.add_function(wrap_pyfunction!(loss_eval, m)?)?;
    m.add_function(wrap_pyfunction!(solve_f_plain, m)?)?;
    m.add_function(wrap_pyfunction!(solve_f_kl, m)?)?;
    m.add_function(wrap_pyfunction!(harden, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_fit, m)?)?;
    m.add_function(wrap_pyfunction!(aligned_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_transition, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    Ok(())
}
