//! Dense strictly convex QP `min |target - v|_Q^2 s.t. A v <= b` for a few
//! variables and many rows.
//!
//! The solver is a dual active-set method in the Goldfarb-Idnani family:
//! every iterate minimizes the objective over the rows held active, and
//! violated rows are brought in one at a time (dropping rows whose
//! multipliers would turn negative). Stopping at the iteration cap therefore
//! leaves a dual-feasible but possibly primal-infeasible point, which is
//! reported honestly through [`QpResult::feasible`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const FEAS_TOL: f64 = 1e-8;
pub const KKT_TOL: f64 = 1e-8;

/// A row whose component outside the span of the active rows is below this
/// is treated as linearly dependent on them.
const DEPENDENCE_TOL: f64 = 1e-10;

/// SPD weighting matrix with its factorization.
#[derive(Debug, Clone)]
pub struct Weight {
    q: DMatrix<f64>,
    q_inv: DMatrix<f64>,
}

impl Weight {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let m = q.nrows();
        if m == 0 || q.ncols() != m {
            return Err(Error::dim("Q columns", m, q.ncols()));
        }
        let scale = q.amax().max(1.0);
        if (&q - q.transpose()).amax() > 1e-12 * scale {
            return Err(Error::InvalidConfig("Q must be symmetric".into()));
        }
        let chol = Cholesky::<f64, Dyn>::new(q.clone())
            .ok_or_else(|| Error::InvalidConfig("Q must be positive definite".into()))?;
        let q_inv = chol.inverse();
        Ok(Self { q, q_inv })
    }

    pub fn identity(m: usize) -> Self {
        Self {
            q: DMatrix::identity(m, m),
            q_inv: DMatrix::identity(m, m),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_identity(&self) -> bool {
        self.q == DMatrix::identity(self.dim(), self.dim())
    }

    /// `|d|_Q^2 = d' Q d`.
    pub fn norm_sq(&self, d: &DVector<f64>) -> f64 {
        d.dot(&(&self.q * d))
    }

    pub fn norm(&self, d: &DVector<f64>) -> f64 {
        self.norm_sq(d).max(0.0).sqrt()
    }

    pub(crate) fn scaled(&self, factor: f64) -> Self {
        Self {
            q: &self.q * factor,
            q_inv: &self.q_inv / factor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub weight: Weight,
    pub target: DVector<f64>,
    pub a_ineq: DMatrix<f64>,
    pub b_ineq: DVector<f64>,
}

impl QpProblem {
    pub fn new(q: DMatrix<f64>, target: DVector<f64>, a_ineq: DMatrix<f64>, b_ineq: DVector<f64>) -> Result<Self> {
        let weight = Weight::new(q)?;
        let p = Self {
            weight,
            target,
            a_ineq,
            b_ineq,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let m = self.weight.dim();
        if self.target.len() != m {
            return Err(Error::dim("QP target", m, self.target.len()));
        }
        if self.a_ineq.ncols() != m {
            return Err(Error::dim("QP row width", m, self.a_ineq.ncols()));
        }
        if self.b_ineq.len() != self.a_ineq.nrows() {
            return Err(Error::dim("QP bounds", self.a_ineq.nrows(), self.b_ineq.len()));
        }
        Ok(())
    }

    /// `|target - v|_Q^2`.
    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        self.weight.norm_sq(&(&self.target - v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpResult {
    pub v: DVector<f64>,
    /// Violated rows taken up, each one a (possibly partial) dual step
    /// sequence ending in an addition. This is what `max_iter` caps.
    pub iterations: usize,
    /// Rows released along the way.
    pub drops: usize,
    pub converged: bool,
    /// `A v <= b + FEAS_TOL` (rows measured after unit scaling).
    pub feasible: bool,
    /// The rows were proven to admit no solution.
    pub infeasible: bool,
    pub kkt_residual: f64,
    /// Active rows at exit; pass back as the next warm start.
    pub active: Vec<usize>,
    /// Dependent rows met while building or extending the active set.
    pub degeneracies: usize,
}

/// Reusable solver; holds scratch space for the row products.
#[derive(Debug, Clone, Default)]
pub struct ActiveSetQp {
    row_norms: Vec<f64>,
    inv_norms: Vec<f64>,
    scratch: Vec<f64>,
}

impl ActiveSetQp {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&mut self, p: &QpProblem, warm_start: &[usize], max_iter: usize) -> Result<QpResult> {
        p.check()?;
        Ok(self.solve_raw(&p.weight, &p.target, &p.a_ineq, &p.b_ineq, warm_start, max_iter))
    }

    /// Minimizes `|r - v|_Q^2 + |v_prev - v|_Q^2`, the objective that tempers
    /// moves away from the previous command. Equivalent to projecting the
    /// midpoint `(r + v_prev) / 2` under `2Q`.
    #[allow(clippy::too_many_arguments)]
    pub fn solve_biobjective(
        &mut self,
        r: &DVector<f64>,
        v_prev: &DVector<f64>,
        weight: &Weight,
        a_ineq: &DMatrix<f64>,
        b_ineq: &DVector<f64>,
        warm_start: &[usize],
        max_iter: usize,
    ) -> Result<QpResult> {
        let p = QpProblem {
            weight: weight.scaled(2.0),
            target: (r + v_prev) * 0.5,
            a_ineq: a_ineq.clone(),
            b_ineq: b_ineq.clone(),
        };
        self.solve(&p, warm_start, max_iter)
    }

    /// Like [`ActiveSetQp::solve`] on borrowed data; skips dimension checks.
    pub fn solve_raw(
        &mut self,
        weight: &Weight,
        target: &DVector<f64>,
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        warm_start: &[usize],
        max_iter: usize,
    ) -> QpResult {
        let rows = a.nrows();
        let m = weight.dim();
        // Column sweeps keep the norm pass contiguous in column-major storage.
        self.row_norms.clear();
        self.row_norms.resize(rows, 0.0);
        for col in a.as_slice().chunks_exact(rows.max(1)) {
            for (acc, x) in self.row_norms.iter_mut().zip(col) {
                *acc += x * x;
            }
        }
        for nrm in &mut self.row_norms {
            *nrm = nrm.sqrt().max(f64::MIN_POSITIVE);
        }
        self.inv_norms.clear();
        self.inv_norms.extend(self.row_norms.iter().map(|nrm| 1.0 / nrm));

        let mut st = ActiveState {
            weight,
            target,
            a,
            b,
            active: Vec::with_capacity(m),
            mult: Vec::with_capacity(m),
            v: target.clone(),
            degeneracies: 0,
        };
        st.warm(warm_start, &self.row_norms);

        let mut iterations = 0usize;
        let mut drops = 0usize;
        let mut infeasible = false;
        let mut stalled = 0usize;
        let mut last_obj = st.objective();
        // `scan` holds the entering row and the largest violation at the
        // current iterate.
        let mut scan = self.scan(&st, false);
        'outer: while let Some(p) = scan.0 {
            if iterations >= max_iter {
                break;
            }
            iterations += 1;
            // Partial multiplier of the entering row.
            let mut u_p = 0.0;
            loop {
                let (z, r) = st.directions(p);
                let np = a.row(p).transpose();
                let zn = -z.dot(&np);
                let s_p = b[p] - np.dot(&st.v);
                // Dual step bound from active multipliers.
                let mut t1 = f64::INFINITY;
                let mut leave = None;
                for (k, rk) in r.iter().enumerate() {
                    if *rk > 0.0 {
                        let ratio = st.mult[k] / rk;
                        if ratio < t1 {
                            t1 = ratio;
                            leave = Some(k);
                        }
                    }
                }
                let z_dep = z.norm() <= DEPENDENCE_TOL * (&weight.q_inv * &np).norm();
                let t2 = if z_dep || zn <= 0.0 { f64::INFINITY } else { -s_p / zn };
                if z_dep {
                    st.degeneracies += 1;
                }
                let t = t1.min(t2);
                if !t.is_finite() {
                    infeasible = true;
                    break 'outer;
                }
                if t2.is_finite() {
                    st.v.axpy(t, &z, 1.0);
                }
                for (k, rk) in r.iter().enumerate() {
                    st.mult[k] -= t * rk;
                }
                u_p += t;
                if t2 <= t1 {
                    st.active.push(p);
                    st.mult.push(u_p);
                    break;
                }
                let k = leave.expect("finite t1 has a leaving row");
                st.active.remove(k);
                st.mult.remove(k);
                drops += 1;
            }
            let obj = st.objective();
            if obj > last_obj * (1.0 + 1e-14) + 1e-300 {
                stalled = 0;
            } else {
                stalled += 1;
            }
            last_obj = obj;
            scan = self.scan(&st, stalled >= 3 * m);
        }

        let mut converged = false;
        if infeasible {
            scan = self.scan(&st, false);
        } else if scan.0.is_none() {
            // Recompute the vertex from the final active rows to shed the
            // round-off accumulated by the incremental steps.
            st.polish();
            scan = self.scan(&st, false);
            converged = scan.0.is_none();
        }
        let viol = scan.1;
        let kkt = st.kkt_residual(viol);
        QpResult {
            feasible: viol <= FEAS_TOL,
            converged: converged && kkt <= KKT_TOL,
            infeasible,
            kkt_residual: kkt,
            iterations,
            drops,
            active: st.active,
            degeneracies: st.degeneracies,
            v: st.v,
        }
    }

    /// One pass over the rows: the entering row (largest scaled violation
    /// above tolerance, lowest index on ties; with `bland`, the lowest
    /// violated index) and the largest scaled violation (at least 0).
    fn scan(&mut self, st: &ActiveState, bland: bool) -> (Option<usize>, f64) {
        let rows = st.a.nrows();
        let data = st.a.as_slice();
        let av = &mut self.scratch;
        av.clear();
        av.extend(st.b.as_slice().iter().map(|bi| -bi));
        for (j, vj) in st.v.as_slice().iter().enumerate() {
            let col = &data[j * rows..(j + 1) * rows];
            for (acc, aij) in av.iter_mut().zip(col) {
                *acc += aij * vj;
            }
        }
        for (ax, inv) in av.iter_mut().zip(&self.inv_norms) {
            *ax *= inv;
        }
        let worst = av.iter().fold(0.0f64, |w, &x| w.max(x));
        let mut best: Option<(usize, f64)> = None;
        if worst > FEAS_TOL {
            for (i, &viol) in av.iter().enumerate() {
                if viol <= FEAS_TOL || (bland && best.is_some()) || st.active.contains(&i) {
                    continue;
                }
                if best.is_none_or(|(_, b)| viol > b) {
                    best = Some((i, viol));
                }
            }
        }
        (best.map(|(i, _)| i), worst)
    }
}

struct ActiveState<'a> {
    weight: &'a Weight,
    target: &'a DVector<f64>,
    a: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    active: Vec<usize>,
    mult: Vec<f64>,
    v: DVector<f64>,
    degeneracies: usize,
}

impl ActiveState<'_> {
    fn objective(&self) -> f64 {
        self.weight.norm_sq(&(&self.v - self.target))
    }

    fn normals(&self, rows: &[usize]) -> DMatrix<f64> {
        let m = self.weight.dim();
        let mut n = DMatrix::zeros(m, rows.len());
        for (k, &i) in rows.iter().enumerate() {
            n.set_column(k, &self.a.row(i).transpose());
        }
        n
    }

    /// Primal step `z` and multiplier sensitivities `r` for entering row `p`
    /// (in the `a_p v <= b_p` orientation the step reduces `a_p v`).
    fn directions(&self, p: usize) -> (DVector<f64>, DVector<f64>) {
        let ginv = &self.weight.q_inv;
        let np = self.a.row(p).transpose();
        if self.active.is_empty() {
            return (-(ginv * &np), DVector::zeros(0));
        }
        let n = self.normals(&self.active);
        let gn = ginv * &n;
        let mtx = n.transpose() * &gn;
        let r = mtx
            .clone()
            .cholesky()
            .map(|c| c.solve(&(gn.transpose() * &np)))
            .unwrap_or_else(|| mtx.lu().solve(&(gn.transpose() * &np)).unwrap_or_else(|| DVector::zeros(n.ncols())));
        let z = -(ginv * &np - &gn * &r);
        // With `<=` rows the active multipliers decrease along r.
        (z, r)
    }

    /// Equality-constrained minimizer on `rows`: `(v, multipliers)`.
    fn equality_solution(&self, rows: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
        if rows.is_empty() {
            return Some((self.target.clone(), DVector::zeros(0)));
        }
        let n = self.normals(rows);
        let gn = &self.weight.q_inv * &n;
        let mtx = n.transpose() * &gn;
        let rhs = n.transpose() * self.target - self.b.select_rows(rows.iter());
        let lambda = mtx.cholesky()?.solve(&rhs);
        let v = self.target - gn * &lambda;
        Some((v, lambda))
    }

    /// Starts from the rows of a previous solve: dependent rows are skipped,
    /// then rows with negative multipliers are released until the point is
    /// dual feasible.
    fn warm(&mut self, warm_start: &[usize], row_norms: &[f64]) {
        let m = self.weight.dim();
        let mut rows: Vec<usize> = Vec::with_capacity(m);
        for &i in warm_start {
            if i >= self.a.nrows() || rows.contains(&i) || rows.len() == m {
                continue;
            }
            if self.independent(&rows, i, row_norms[i]) {
                rows.push(i);
            } else {
                self.degeneracies += 1;
            }
        }
        loop {
            let Some((v, lambda)) = self.equality_solution(&rows) else {
                rows.pop();
                self.degeneracies += 1;
                continue;
            };
            let worst = (0..rows.len())
                .filter(|&k| lambda[k] < 0.0)
                .min_by(|&x, &y| lambda[x].total_cmp(&lambda[y]).then(x.cmp(&y)));
            match worst {
                Some(k) => {
                    rows.remove(k);
                }
                None => {
                    self.v = v;
                    self.mult = lambda.iter().copied().collect();
                    self.active = rows;
                    return;
                }
            }
        }
    }

    fn independent(&self, rows: &[usize], i: usize, norm: f64) -> bool {
        let ai = self.a.row(i).transpose() / norm;
        if rows.is_empty() {
            return true;
        }
        let qr = self.normals(rows).qr();
        let q = qr.q();
        let resid = &ai - &q * (q.transpose() * &ai);
        resid.norm() > DEPENDENCE_TOL.sqrt()
    }

    fn polish(&mut self) {
        let rows = self.active.clone();
        if let Some((v, lambda)) = self.equality_solution(&rows) {
            if lambda.iter().all(|l| *l >= -KKT_TOL) {
                self.v = v;
                self.mult = lambda.iter().copied().collect();
            }
        }
    }

    fn kkt_residual(&self, violation: f64) -> f64 {
        let mut grad = &self.weight.q * (&self.v - self.target);
        for (k, &i) in self.active.iter().enumerate() {
            grad += self.a.row(i).transpose() * self.mult[k];
        }
        let scale = 1.0 + (&self.weight.q * self.target).amax();
        let stationarity = grad.amax() / scale;
        let complementarity = self
            .active
            .iter()
            .zip(&self.mult)
            .map(|(&i, &u)| (u * (self.b[i] - self.a.row(i).dot(&self.v.transpose()))).abs())
            .fold(0.0, f64::max);
        let dual = self.mult.iter().map(|u| (-u).max(0.0)).fold(0.0, f64::max);
        stationarity.max(violation).max(complementarity).max(dual)
    }
}
