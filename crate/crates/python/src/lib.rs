use std::path::PathBuf;
use std::sync::Arc;

use command_governor::governor::{self as gov, GovernorConfig, Objective, SolverKind, Variant};
use command_governor::polytope::{io, reduce::reduce as reduce_set};
use command_governor::qp::{ActiveSetQp, QpProblem, Weight};
use command_governor::scenario::{Scenario as CoreScenario, SetCache};
use command_governor::sim;
use command_governor::{ConstraintMap, Error, LinearSystem, Polytope};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(cgov, GovernorError, PyException);

fn to_py(e: Error) -> PyErr {
    if e.is_usage() {
        PyValueError::new_err(e.to_string())
    } else {
        GovernorError::new_err(e.to_string())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    Ok(match s {
        "srg" => Variant::Srg,
        "cg_exact" => Variant::CgExact,
        "cg_modified" => Variant::CgModified,
        "algorithm1" => Variant::Algorithm1,
        _ => return Err(PyValueError::new_err(format!("unknown variant {s:?}"))),
    })
}

/// `x(t+1) = A x(t) + B v(t)` with Schur `A`.
#[pyclass(name = "LinearSystem", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLinearSystem {
    inner: Arc<LinearSystem>,
}

#[pymethods]
impl PyLinearSystem {
    #[new]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<Self> {
        let sys = LinearSystem::new(matrix(&a, "A")?, matrix(&b, "B")?).map_err(to_py)?;
        Ok(Self { inner: Arc::new(sys) })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    fn spectral_radius(&self) -> f64 {
        self.inner.spectral_radius()
    }

    fn step(&self, x: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.step(&vector(x), &vector(v)).map_err(to_py)?.as_slice().to_vec())
    }

    fn equilibrium(&self, v: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.equilibrium(&vector(v)).map_err(to_py)?.as_slice().to_vec())
    }
}

/// Box constraints `lo <= Cc x + Dc v <= hi`.
#[pyclass(name = "ConstraintMap", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyConstraintMap {
    inner: ConstraintMap,
}

#[pymethods]
impl PyConstraintMap {
    #[new]
    fn new(cc: Vec<Vec<f64>>, dc: Vec<Vec<f64>>, bounds: Vec<(f64, f64)>) -> PyResult<Self> {
        let inner = ConstraintMap::from_intervals(matrix(&cc, "Cc")?, matrix(&dc, "Dc")?, &bounds).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    fn margin(&self, x: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
        self.inner.margin(&vector(x), &vector(v)).map_err(to_py)
    }
}

/// Polyhedral set of `(x, v)` pairs.
#[pyclass(name = "SafeSet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySafeSet {
    inner: Arc<command_governor::SafeSet>,
}

#[pymethods]
impl PySafeSet {
    #[staticmethod]
    #[pyo3(signature = (path, n, m, invariant=false))]
    fn load(path: PathBuf, n: usize, m: usize, invariant: bool) -> PyResult<Self> {
        let poly = io::load(&path).map_err(to_py)?;
        let set = command_governor::SafeSet::new(poly, n, m, invariant).map_err(to_py)?;
        Ok(Self { inner: Arc::new(set) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(self.inner.poly(), &path).map_err(to_py)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.inner.rows()
    }

    #[getter]
    fn invariant(&self) -> bool {
        self.inner.is_invariant()
    }

    #[getter]
    fn h(&self) -> Vec<Vec<f64>> {
        rows_of(self.inner.poly().h())
    }

    #[getter]
    fn b(&self) -> Vec<f64> {
        self.inner.poly().b().as_slice().to_vec()
    }

    #[pyo3(signature = (x, v, tol=1e-9))]
    fn contains(&self, x: Vec<f64>, v: Vec<f64>, tol: f64) -> bool {
        self.inner.contains(&vector(x), &vector(v), tol)
    }

    fn __repr__(&self) -> String {
        format!(
            "SafeSet(rows={}, n={}, m={}, invariant={})",
            self.inner.rows(),
            self.inner.n(),
            self.inner.m(),
            self.inner.is_invariant()
        )
    }
}

/// Builds the finitely determined admissible set. Returns
/// `(set, t_star, certificate_excess)`.
#[pyfunction]
#[pyo3(signature = (system, constraints, epsilon=1e-3, t_max=500, tol=1e-9))]
fn build_moas(
    system: &PyLinearSystem,
    constraints: &PyConstraintMap,
    epsilon: f64,
    t_max: usize,
    tol: f64,
) -> PyResult<(PySafeSet, usize, f64)> {
    let cfg = command_governor::MoasConfig { epsilon, t_max, tol };
    let moas = command_governor::build_moas(&system.inner, &constraints.inner, &cfg).map_err(to_py)?;
    Ok((
        PySafeSet {
            inner: Arc::new(moas.set),
        },
        moas.t_star,
        moas.certificate_excess,
    ))
}

/// Drops rows with slack below `slack` and pulls the rest inside `full`.
/// Returns `(set, factor, storage_ratio)`.
#[pyfunction]
#[pyo3(signature = (full, slack=1e-3, factor=None))]
fn reduce(full: &PySafeSet, slack: f64, factor: Option<f64>) -> PyResult<(PySafeSet, f64, f64)> {
    let mut cfg = command_governor::polytope::reduce::ReductionConfig {
        slack_threshold: slack,
        ..Default::default()
    };
    if let Some(f) = factor {
        cfg.factor = command_governor::polytope::reduce::PullInFactor::Fixed(f);
    }
    let red = reduce_set(&full.inner, &cfg).map_err(to_py)?;
    let ratio = red.storage_ratio();
    Ok((
        PySafeSet {
            inner: Arc::new(red.set),
        },
        red.factor,
        ratio,
    ))
}

/// Minimizes `|v - target|_Q^2` subject to `A v <= b`. Returns a dict with
/// `v`, `iterations`, `converged`, `feasible` and `active`.
#[pyfunction]
#[pyo3(signature = (q, target, a, b, max_iter=200, warm_start=Vec::new()))]
fn solve_qp<'py>(
    py: Python<'py>,
    q: Vec<Vec<f64>>,
    target: Vec<f64>,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    max_iter: usize,
    warm_start: Vec<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let p = QpProblem::new(matrix(&q, "Q")?, vector(target), matrix(&a, "A")?, vector(b)).map_err(to_py)?;
    let res = ActiveSetQp::new().solve(&p, &warm_start, max_iter).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("v", res.v.as_slice().to_vec())?;
    d.set_item("iterations", res.iterations)?;
    d.set_item("converged", res.converged)?;
    d.set_item("feasible", res.feasible)?;
    d.set_item("active", res.active)?;
    Ok(d)
}

/// Stateful governor; call `step(x, r)` once per sample.
#[pyclass(name = "Governor")]
struct PyGovernor {
    inner: gov::Governor,
}

#[pymethods]
impl PyGovernor {
    #[new]
    #[pyo3(signature = (
        variant, set, system, x0, r0, *, q=None, biobjective=false, coordinate_descent=false,
        max_iter=200, eps_prime=1e-2, delta_prime=0.05, delta_dprime=0.05, n_period=None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        set: &PySafeSet,
        system: &PyLinearSystem,
        x0: Vec<f64>,
        r0: Vec<f64>,
        q: Option<Vec<Vec<f64>>>,
        biobjective: bool,
        coordinate_descent: bool,
        max_iter: usize,
        eps_prime: f64,
        delta_prime: f64,
        delta_dprime: f64,
        n_period: Option<usize>,
    ) -> PyResult<Self> {
        let m = system.inner.m();
        let mut cfg = GovernorConfig::new(parse_variant(variant)?, m);
        if let Some(q) = q {
            cfg.weight = Weight::new(matrix(&q, "Q")?).map_err(to_py)?;
        }
        if biobjective {
            cfg.objective = Objective::Biobjective;
        }
        if coordinate_descent {
            cfg.solver = SolverKind::CoordinateDescent;
        }
        cfg.max_iter = max_iter;
        cfg.eps_prime = eps_prime;
        cfg.delta_prime = delta_prime;
        cfg.delta_dprime = delta_dprime;
        cfg.n_period = n_period.unwrap_or(m + 1);
        let inner = gov::Governor::new(cfg, set.inner.clone(), system.inner.clone(), &vector(x0), &vector(r0))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn v_prev(&self) -> Vec<f64> {
        self.inner.state().v_prev.as_slice().to_vec()
    }

    /// Returns a dict with `v`, `candidate`, `accepted`, `fallback`,
    /// `value` and `iterations`.
    fn step<'py>(&mut self, py: Python<'py>, x: Vec<f64>, r: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.step(&vector(x), &vector(r)).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("v", out.v_applied.as_slice().to_vec())?;
        d.set_item("candidate", out.candidate.as_slice().to_vec())?;
        d.set_item("accepted", out.accepted)?;
        d.set_item("fallback", out.fallback_used)?;
        d.set_item("value", out.v_value)?;
        d.set_item("iterations", out.solver.iterations)?;
        Ok(d)
    }
}

/// A scenario file (or `bundled:f16`, `bundled:scalar`) with its named
/// governors.
#[pyclass(name = "Scenario")]
struct PyScenario {
    inner: CoreScenario,
    cache: SetCache,
}

#[pymethods]
impl PyScenario {
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        let inner = match source.strip_prefix("bundled:") {
            Some(name) => CoreScenario::bundled(name),
            None => CoreScenario::load(std::path::Path::new(source)),
        }
        .map_err(to_py)?;
        Ok(Self {
            inner,
            cache: SetCache::default(),
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn governors(&self) -> Vec<String> {
        self.inner.governors.keys().cloned().collect()
    }

    #[getter]
    fn system(&self) -> PyLinearSystem {
        PyLinearSystem {
            inner: self.inner.system.clone(),
        }
    }

    #[getter]
    fn constraints(&self) -> PyConstraintMap {
        PyConstraintMap {
            inner: self.inner.constraints.clone(),
        }
    }

    fn moas(&mut self) -> PyResult<PySafeSet> {
        let inner = self.cache.moas(&self.inner).map_err(to_py)?;
        Ok(PySafeSet { inner })
    }

    fn reduced(&mut self) -> PyResult<PySafeSet> {
        let inner = self.cache.reduced(&self.inner).map_err(to_py)?;
        Ok(PySafeSet { inner })
    }

    /// Closed-loop run of one named governor. Returns `(csv, summary_json)`.
    #[pyo3(signature = (governor, horizon=None))]
    fn simulate(&mut self, governor: &str, horizon: Option<usize>) -> PyResult<(String, String)> {
        let entry = self.cache.entry(&self.inner, governor).map_err(to_py)?;
        let sc = &self.inner;
        let (trace, summary) = sim::run_scenario(
            &sc.system,
            &sc.constraints,
            &entry.set,
            &entry.cfg,
            &sc.profile,
            &sc.x0,
            horizon.unwrap_or(sc.horizon),
        )
        .map_err(to_py)?;
        let json = serde_json::to_string(&summary).map_err(|e| to_py(e.into()))?;
        Ok((trace.to_csv(), json))
    }

    /// Timing comparison of named governors. Returns `(table, report_json)`.
    #[pyo3(signature = (governors, repeats=None, horizon=None))]
    fn compare(
        &mut self,
        governors: Vec<String>,
        repeats: Option<usize>,
        horizon: Option<usize>,
    ) -> PyResult<(String, String)> {
        let entries = governors
            .iter()
            .map(|g| self.cache.entry(&self.inner, g))
            .collect::<command_governor::Result<Vec<_>>>()
            .map_err(to_py)?;
        let sc = &self.inner;
        let report = sim::compare_implementations(
            &sc.system,
            &sc.constraints,
            &entries,
            &sc.profile,
            &sc.x0,
            horizon.unwrap_or(sc.horizon),
            repeats.unwrap_or(sc.repeats),
            false,
        )
        .map_err(to_py)?;
        let json = serde_json::to_string(&report).map_err(|e| to_py(e.into()))?;
        Ok((report.table(), json))
    }
}

/// Membership test for `{z : H z <= b}` with unit-scaled rows.
#[pyfunction]
fn polytope_contains(h: Vec<Vec<f64>>, b: Vec<f64>, z: Vec<f64>, tol: f64) -> PyResult<bool> {
    let p = Polytope::new(matrix(&h, "H")?, vector(b)).map_err(to_py)?;
    Ok(p.contains(&vector(z), tol))
}

#[pymodule]
fn cgov(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GovernorError", m.py().get_type::<GovernorError>())?;
    m.add_class::<PyLinearSystem>()?;
    m.add_class::<PyConstraintMap>()?;
    m.add_class::<PySafeSet>()?;
    m.add_class::<PyGovernor>()?;
    m.add_class::<PyScenario>()?;
    m.add_function(wrap_pyfunction!(build_moas, m)?)?;
    m.add_function(wrap_pyfunction!(reduce, m)?)?;
    m.add_function(wrap_pyfunction!(solve_qp, m)?)?;
    m.add_function(wrap_pyfunction!(polytope_contains, m)?)?;
    Ok(())
}
