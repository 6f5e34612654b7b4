//! Python bindings: `import cpdcrib`.
//!
//! Factor matrices cross the boundary as row-major nested lists and tensors as
//! `(dims, values)` with column-major values.

use cpd_crib::analysis::{self, Algorithm, McConfig};
use cpd_crib::closed_forms::{self, BrieParams, OrthoCaseParams, Rank2Params};
use cpd_crib::crib::crib_masked;
use cpd_crib::io;
use cpd_crib::solver::{fit_als, fit_gn, Init, SolverConfig};
use cpd_crib::tensor::{full_tensor, DenseTensor as CoreTensor, KruskalModel as CoreModel};
use cpd_crib::{CribError, CribRequest, Method};
use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn err(e: CribError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Rank-R Kruskal model.
#[pyclass(name = "KruskalModel", module = "cpdcrib", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyKruskalModel {
    inner: CoreModel,
}

#[pymethods]
impl PyKruskalModel {
    /// `factors[n][i][r]` is row `i`, column `r` of the mode-`n` factor.
    #[new]
    fn new(factors: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let mut mats = Vec::with_capacity(factors.len());
        for (n, rows) in factors.iter().enumerate() {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(PyValueError::new_err(format!("factor {n} has ragged rows")));
            }
            mats.push(DMatrix::from_fn(rows.len(), cols, |i, r| rows[i][r]));
        }
        CoreModel::new(mats).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::kruskal_from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        io::kruskal_to_json(&self.inner)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    fn factors(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner
            .factors()
            .iter()
            .map(|a| a.row_iter().map(|row| row.iter().copied().collect()).collect())
            .collect()
    }

    /// Unit-norm columns in modes 2..N, magnitudes in mode 1.
    fn normalize(&self) -> Self {
        Self { inner: self.inner.normalize() }
    }

    fn full(&self) -> PyDenseTensor {
        PyDenseTensor { inner: full_tensor(&self.inner) }
    }

    fn __repr__(&self) -> String {
        format!("KruskalModel(dims={:?}, rank={})", self.inner.dims(), self.inner.rank())
    }
}

/// Dense tensor, values in column-major order.
#[pyclass(name = "DenseTensor", module = "cpdcrib", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDenseTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyDenseTensor {
    #[new]
    fn new(dims: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        CoreTensor::new(dims, values).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::tensor_from_json(text).map(|inner| Self { inner }).map_err(err)
    }

    fn to_json(&self) -> String {
        io::tensor_to_json(&self.inner)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("DenseTensor(dims={:?})", self.inner.dims())
    }
}

#[pyclass(name = "CribReport", module = "cpdcrib", frozen, get_all)]
pub struct PyCribReport {
    crib: f64,
    crib_db: f64,
    angle_deg: f64,
    finite: bool,
    method: String,
    epsilon_applied: bool,
}

#[pymethods]
impl PyCribReport {
    fn __repr__(&self) -> String {
        format!("CribReport(crib={}, crib_db={:.4}, finite={}, method='{}')", self.crib, self.crib_db, self.finite, self.method)
    }
}

impl From<cpd_crib::CribReport> for PyCribReport {
    fn from(r: cpd_crib::CribReport) -> Self {
        Self {
            crib: r.crib_linear,
            crib_db: r.crib_db,
            angle_deg: r.angle_std_deg,
            finite: r.finite,
            method: r.method.to_string(),
            epsilon_applied: r.epsilon_applied,
        }
    }
}

fn parse_method(method: &str) -> PyResult<Method> {
    method.parse().map_err(err)
}

/// CRIB of column `target = (mode, column)`, both 1-based.
#[pyfunction]
#[pyo3(signature = (model, sigma2 = 1.0, target = (1, 1), method = "auto", mask = None))]
fn crib(
    py: Python<'_>,
    model: &PyKruskalModel,
    sigma2: f64,
    target: (usize, usize),
    method: &str,
    mask: Option<&PyDenseTensor>,
) -> PyResult<PyCribReport> {
    if target.0 == 0 || target.1 == 0 {
        return Err(PyValueError::new_err("target is 1-based"));
    }
    let t = (target.0 - 1, target.1 - 1);
    let method = parse_method(method)?;
    let m = model.inner.clone();
    let w = mask.map(|w| w.inner.clone());
    py.detach(move || match w {
        Some(w) => crib_masked(&m, &w, t, sigma2),
        None => cpd_crib::crib(&CribRequest::new(m, sigma2).with_target(t.0, t.1).with_method(method)),
    })
    .map(Into::into)
    .map_err(err)
}

/// `result[n][r]` for every column of every mode.
#[pyfunction]
#[pyo3(signature = (model, sigma2 = 1.0, method = "auto", mask = None))]
fn crib_all(
    py: Python<'_>,
    model: &PyKruskalModel,
    sigma2: f64,
    method: &str,
    mask: Option<&PyDenseTensor>,
) -> PyResult<Vec<Vec<PyCribReport>>> {
    let method = parse_method(method)?;
    let m = model.inner.clone();
    let w = mask.map(|w| w.inner.clone());
    let all = py.detach(move || cpd_crib::crib::crib_all_columns(&m, sigma2, method, w.as_ref())).map_err(err)?;
    Ok(all.into_iter().map(|row| row.into_iter().map(Into::into).collect()).collect())
}

#[pyfunction]
#[pyo3(signature = (i1, sigma2 = 1.0, norm_a1 = 1.0))]
fn crib_rank1(i1: usize, sigma2: f64, norm_a1: f64) -> f64 {
    closed_forms::crib_rank1(i1, sigma2, norm_a1)
}

#[pyfunction]
#[pyo3(signature = (i1, c, sigma2 = 1.0, norm_a1 = 1.0))]
fn crib_rank2(i1: usize, c: Vec<f64>, sigma2: f64, norm_a1: f64) -> PyResult<f64> {
    closed_forms::crib_rank2(&Rank2Params { sigma2, norm_a1, ..Rank2Params::new(i1, c) }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (i1, gammas, sigma2 = 1.0, norm_a1 = 1.0))]
fn crib_ortho(i1: usize, gammas: Vec<f64>, sigma2: f64, norm_a1: f64) -> PyResult<f64> {
    closed_forms::crib_ortho(&OrthoCaseParams { sigma2, norm_a1, ..OrthoCaseParams::new(i1, gammas) }).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (i1, c2, c3, c4, sigma2 = 1.0, norm_a1 = 1.0))]
fn brie_crib(i1: usize, c2: f64, c3: f64, c4: f64, sigma2: f64, norm_a1: f64) -> PyResult<f64> {
    closed_forms::brie_crib(&BrieParams { sigma2, norm_a1, ..BrieParams::new(i1, c2, c3, c4) }).map_err(err)
}

#[pyfunction]
fn db_and_angle(crib_linear: f64) -> (f64, f64) {
    cpd_crib::crib::db_and_angle(crib_linear)
}

#[pyfunction]
#[pyo3(signature = (dims, rank, seed = 0))]
fn random_model(dims: Vec<usize>, rank: usize, seed: u64) -> PyResult<PyKruskalModel> {
    analysis::random_model(&dims, rank, seed).map(|inner| PyKruskalModel { inner }).map_err(err)
}

/// Random model whose distinct columns in mode `n` have correlation `c[n]`.
#[pyfunction]
#[pyo3(signature = (dims, rank, c, seed = 0))]
fn model_with_correlations(dims: Vec<usize>, rank: usize, c: Vec<f64>, seed: u64) -> PyResult<PyKruskalModel> {
    analysis::model_with_correlations(&dims, rank, &c, seed).map(|inner| PyKruskalModel { inner }).map_err(err)
}

#[pyfunction]
fn max_stable_rank_bound(dims: Vec<usize>) -> PyResult<usize> {
    analysis::max_stable_rank_bound(&dims).map_err(err)
}

/// Whether a random normalized model of this size has a finite CRIB.
#[pyfunction]
#[pyo3(signature = (dims, rank, seed = 0))]
fn check_stability(dims: Vec<usize>, rank: usize, seed: u64) -> PyResult<bool> {
    analysis::check_stability(&dims, rank, seed).map(|r| r.finite).map_err(err)
}

#[pyfunction]
fn uniqueness_necessary(model: &PyKruskalModel) -> bool {
    analysis::uniqueness_necessary(&model.inner)
}

/// `(crib_original, crib_reshaped, loss_db)` for merging the 1-based `merge` modes.
#[pyfunction]
#[pyo3(signature = (model, merge, sigma2 = 1.0))]
fn reshape_loss(model: &PyKruskalModel, merge: Vec<usize>, sigma2: f64) -> PyResult<(f64, f64, f64)> {
    let merge = zero_based(&merge)?;
    let r = analysis::reshape_loss(&model.inner, &merge, sigma2, Method::Auto).map_err(err)?;
    Ok((r.crib_original, r.crib_reshaped, r.loss_db))
}

/// [`reshape_loss`] for a rank-2 model given by its correlations `c₁…c_N`.
#[pyfunction]
#[pyo3(signature = (i1, c, merge, sigma2 = 1.0))]
fn reshape_loss_rank2(i1: usize, c: Vec<f64>, merge: Vec<usize>, sigma2: f64) -> PyResult<(f64, f64, f64)> {
    if c.len() < 3 || c.iter().any(|x| !(-1.0..=1.0).contains(x)) {
        return Err(PyValueError::new_err("need at least 3 correlations in [-1, 1]"));
    }
    let merge = zero_based(&merge)?;
    let cache = Rank2Params::new(i1, c).grams();
    let r = analysis::reshape_loss_from_grams(&cache, i1, &merge, sigma2).map_err(err)?;
    Ok((r.crib_original, r.crib_reshaped, r.loss_db))
}

fn zero_based(merge: &[usize]) -> PyResult<Vec<usize>> {
    if merge.contains(&0) {
        return Err(PyValueError::new_err("merge modes are 1-based"));
    }
    Ok(merge.iter().map(|m| m - 1).collect())
}

#[pyclass(name = "FitResult", module = "cpdcrib", frozen, get_all)]
pub struct PyFitResult {
    model: PyKruskalModel,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
    sigma2: f64,
    sigma2_unbiased: Option<f64>,
}

/// Fits a rank-`rank` CP model with damped Gauss-Newton (`"gn"`) or ALS (`"als"`).
#[pyfunction]
#[pyo3(signature = (tensor, rank, algo = "gn", mask = None, seed = 0, max_iters = 500, starts = 3, init = None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    tensor: &PyDenseTensor,
    rank: usize,
    algo: &str,
    mask: Option<&PyDenseTensor>,
    seed: u64,
    max_iters: usize,
    starts: usize,
    init: Option<&PyKruskalModel>,
) -> PyResult<PyFitResult> {
    let init = init.map_or(Init::Random, |m| Init::Given(m.inner.clone()));
    let cfg = SolverConfig { max_iters, starts, seed, init, ..Default::default() };
    let t = tensor.inner.clone();
    let w = mask.map(|w| w.inner.clone());
    let res = match algo {
        "gn" => py.detach(|| fit_gn(&t, rank, &cfg, w.as_ref())),
        "als" => py.detach(|| fit_als(&t, rank, &cfg, w.as_ref())),
        other => return Err(PyValueError::new_err(format!("unknown algorithm '{other}'"))),
    }
    .map_err(err)?;
    Ok(PyFitResult {
        model: PyKruskalModel { inner: res.model },
        residual_norm: res.residual_norm,
        iterations: res.iterations,
        converged: res.converged,
        sigma2: res.sigma2,
        sigma2_unbiased: res.sigma2_unbiased,
    })
}

#[pyclass(name = "McResult", module = "cpdcrib", frozen, get_all)]
pub struct PyMcResult {
    msae: Vec<Vec<f64>>,
    msae_db: Vec<Vec<f64>>,
    crib_db: Vec<Vec<f64>>,
    successes: usize,
    failures: usize,
}

/// Monte Carlo mean squared angular errors next to the CRIB of every column.
#[pyfunction]
#[pyo3(signature = (model, sigma2, trials = 200, missing_fraction = None, algo = "gn", seed = 0))]
fn monte_carlo(
    py: Python<'_>,
    model: &PyKruskalModel,
    sigma2: f64,
    trials: usize,
    missing_fraction: Option<f64>,
    algo: &str,
    seed: u64,
) -> PyResult<PyMcResult> {
    let algorithm = match algo {
        "gn" => Algorithm::Gn,
        "als" => Algorithm::Als,
        other => return Err(PyValueError::new_err(format!("unknown algorithm '{other}'"))),
    };
    let cfg = McConfig { trials, missing_fraction, algorithm, seed, ..McConfig::new(model.inner.clone(), sigma2) };
    let r = py.detach(|| analysis::monte_carlo(&cfg)).map_err(err)?;
    Ok(PyMcResult {
        crib_db: r.crib.iter().map(|row| row.iter().map(|c| c.crib_db).collect()).collect(),
        msae: r.msae,
        msae_db: r.msae_db,
        successes: r.successes,
        failures: r.failures,
    })
}

#[pymodule]
fn cpdcrib(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKruskalModel>()?;
    m.add_class::<PyDenseTensor>()?;
    m.add_class::<PyCribReport>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyMcResult>()?;
    m.add_function(wrap_pyfunction!(crib, m)?)?;
    m.add_function(wrap_pyfunction!(crib_all, m)?)?;
    m.add_function(wrap_pyfunction!(crib_rank1, m)?)?;
    m.add_function(wrap_pyfunction!(crib_rank2, m)?)?;
    m.add_function(wrap_pyfunction!(crib_ortho, m)?)?;
    m.add_function(wrap_pyfunction!(brie_crib, m)?)?;
    m.add_function(wrap_pyfunction!(db_and_angle, m)?)?;
    m.add_function(wrap_pyfunction!(random_model, m)?)?;
    m.add_function(wrap_pyfunction!(model_with_correlations, m)?)?;
    m.add_function(wrap_pyfunction!(max_stable_rank_bound, m)?)?;
    m.add_function(wrap_pyfunction!(check_stability, m)?)?;
    m.add_function(wrap_pyfunction!(uniqueness_necessary, m)?)?;
    m.add_function(wrap_pyfunction!(reshape_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reshape_loss_rank2, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    Ok(())
}
