//! Python bindings for `thetaflex`.
//!
//! Complex vectors are Python lists of `complex`. Jets, search problems and
//! reports cross the boundary as JSON strings in the same format the command
//! line tool reads and writes.

use num_complex::Complex64 as C64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use ::thetaflex as core;
use core::bilinear::{self as bl, DirectionJet};
use core::kummer::{self, FlexOrder};
use core::theta::{self, AbelianPoint, DerivRequest};

fn err(e: core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.code()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(format!("INVALID_INPUT: {e}"))
}

/// Period matrix `τ` (symmetric, positive-definite imaginary part).
#[pyclass(name = "RiemannMatrix", module = "thetaflex", frozen)]
struct PyRiemannMatrix {
    inner: theta::RiemannMatrix,
}

#[pymethods]
impl PyRiemannMatrix {
    #[new]
    fn new(tau: Vec<Vec<C64>>) -> PyResult<Self> {
        let g = tau.len();
        if tau.iter().any(|r| r.len() != g) {
            return Err(PyValueError::new_err("INVALID_INPUT: tau must be square"));
        }
        let m = nalgebra::DMatrix::from_fn(g, g, |i, j| tau[i][j]);
        Ok(PyRiemannMatrix { inner: theta::RiemannMatrix::new(m).map_err(err)? })
    }

    /// `τ = i·I_g`.
    #[staticmethod]
    fn identity(g: usize) -> Self {
        PyRiemannMatrix { inner: theta::RiemannMatrix::identity_imaginary(g) }
    }

    /// Seeded random period matrix.
    #[staticmethod]
    fn random(g: usize, seed: u64) -> Self {
        PyRiemannMatrix { inner: core::sampling::random_tau(g, seed) }
    }

    #[getter]
    fn genus(&self) -> usize {
        self.inner.genus()
    }

    #[getter]
    fn tau(&self) -> Vec<Vec<C64>> {
        let t = self.inner.tau();
        (0..t.nrows()).map(|i| (0..t.ncols()).map(|j| t[(i, j)]).collect()).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(json_err)
    }

    fn __repr__(&self) -> String {
        format!("RiemannMatrix(genus={})", self.inner.genus())
    }
}

fn jet_from(s: &str) -> PyResult<DirectionJet> {
    serde_json::from_str(s).map_err(json_err)
}

fn point(z: Vec<C64>, tau: &PyRiemannMatrix) -> PyResult<AbelianPoint> {
    if z.len() != tau.inner.genus() {
        return Err(err(core::Error::DimensionMismatch { expected: tau.inner.genus(), got: z.len() }));
    }
    Ok(AbelianPoint::new(z))
}

/// `θ(z)` and derivatives along each request (a list of up to four directions).
/// Returns `(value, derivs, error_bound)` with the growth factor included.
#[pyfunction]
#[pyo3(signature = (z, tau, derivs=Vec::new(), target=theta::DEFAULT_TARGET))]
fn theta_eval(z: Vec<C64>, tau: &PyRiemannMatrix, derivs: Vec<Vec<Vec<C64>>>, target: f64) -> PyResult<(C64, Vec<C64>, f64)> {
    let reqs: Vec<DerivRequest> = derivs.into_iter().map(DerivRequest).collect();
    let j = theta::theta_eval(&point(z, tau)?, &tau.inner, &reqs, target).map_err(err)?;
    let d = (0..j.derivs.len()).map(|i| j.unscaled_deriv(i)).collect();
    Ok((j.unscaled_value(), d, j.error_bound))
}

/// Normalized Hirota residual; `jet` is a JSON direction jet with `U, V, W, d`.
#[pyfunction]
fn hirota_residual(z: Vec<C64>, tau: &PyRiemannMatrix, jet: &str) -> PyResult<f64> {
    bl::hirota_residual(&point(z, tau)?, &tau.inner, &jet_from(jet)?).map_err(err)
}

/// Normalized one-point residual for `U, V, c` and shift `a`.
#[pyfunction]
fn p_residual(z: Vec<C64>, tau: &PyRiemannMatrix, jet: &str, a: Vec<C64>) -> PyResult<f64> {
    bl::p_residual(&point(z, tau)?, &tau.inner, &jet_from(jet)?, &a).map_err(err)
}

/// Normalized exponent-form residual for `U, V, A, B` and shift `a`.
#[pyfunction]
fn p_ab_residual(z: Vec<C64>, tau: &PyRiemannMatrix, jet: &str, a: Vec<C64>) -> PyResult<f64> {
    bl::p_ab_residual(&point(z, tau)?, &tau.inner, &jet_from(jet)?, &a).map_err(err)
}

/// `u = 2∂²ₓ log θ + c` at `(x, y, t)` from base point `z`.
#[pyfunction]
fn kp_field_u(x: f64, y: f64, t: f64, z: Vec<C64>, tau: &PyRiemannMatrix, jet: &str) -> PyResult<C64> {
    bl::kp_field_u(x, y, t, &point(z, tau)?, &tau.inner, &jet_from(jet)?).map_err(err)
}

/// Run a search; `problem` and the result are JSON.
#[pyfunction]
fn fit(py: Python<'_>, problem: &str) -> PyResult<String> {
    let p: core::search::SearchProblem = serde_json::from_str(problem).map_err(json_err)?;
    let r = py.detach(|| core::search::fit(&p)).map_err(err)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Second-order theta coordinates `Θ₂[σ](z)`, σ in binary order.
#[pyfunction]
fn kummer_map(z: Vec<C64>, tau: &PyRiemannMatrix) -> PyResult<Vec<C64>> {
    let k = kummer::kummer_map(&point(z, tau)?, &tau.inner, &[]).map_err(err)?;
    Ok(k.coords)
}

/// Flex test at every half of `a` with germ directions `(2U, 2V)`; returns the
/// report as JSON.
#[pyfunction]
#[pyo3(signature = (a, u, v, tau, order=2, w=None, threshold=kummer::DEFAULT_RANK_TOL))]
fn flex_test_halves(a: Vec<C64>, u: Vec<C64>, v: Vec<C64>, tau: &PyRiemannMatrix, order: u32, w: Option<Vec<C64>>, threshold: f64) -> PyResult<String> {
    let order = FlexOrder::from_int(order).map_err(err)?;
    let r = kummer::flex_test_halves(&point(a, tau)?, &u, &v, &tau.inner, order, w.as_deref(), threshold).map_err(err)?;
    serde_json::to_string(&r).map_err(json_err)
}

/// Genus-2 decomposability indicator (near zero for products of elliptic curves).
#[pyfunction]
fn decomposability_indicator(tau: &PyRiemannMatrix) -> PyResult<f64> {
    kummer::decomposability_indicator(&tau.inner).map_err(err)
}

#[pymodule]
fn thetaflex(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRiemannMatrix>()?;
    m.add_function(wrap_pyfunction!(theta_eval, m)?)?;
    m.add_function(wrap_pyfunction!(hirota_residual, m)?)?;
    m.add_function(wrap_pyfunction!(p_residual, m)?)?;
    m.add_function(wrap_pyfunction!(p_ab_residual, m)?)?;
    m.add_function(wrap_pyfunction!(kp_field_u, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(kummer_map, m)?)?;
    m.add_function(wrap_pyfunction!(flex_test_halves, m)?)?;
    m.add_function(wrap_pyfunction!(decomposability_indicator, m)?)?;
    Ok(())
}
