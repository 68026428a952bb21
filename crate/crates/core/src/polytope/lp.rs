//! Dense primal active-set LP for `max c.z s.t. H z <= b` with free `z`.
//!
//! Tuned for the shape that shows up in set construction: a handful of
//! variables and hundreds of rows. Each iteration costs one `H p` product plus
//! a QR of the (at most `dim`) working rows.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Feasibility tolerance on `H z - b`.
pub const FEAS_TOL: f64 = 1e-8;

/// Rows whose directional change along the search direction is below this
/// (relative to |p|) are treated as parallel to it.
const DIR_TOL: f64 = 1e-12;
const DUAL_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub value: f64,
    pub argmax: DVector<f64>,
    /// Rows active at the optimum together with their multipliers.
    pub active: Vec<(usize, f64)>,
    pub iterations: usize,
    /// `|c - H_W^T lambda|_inf` at the returned vertex.
    pub dual_residual: f64,
}

/// Maximizes `c.z` over `{z : H z <= b}`.
///
/// `start`, when given, must satisfy the rows to within [`FEAS_TOL`];
/// otherwise a feasible point is found first (origin if `b >= 0`, else a
/// Chebyshev-style phase one).
pub fn lp_max(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    c: &DVector<f64>,
    start: Option<&DVector<f64>>,
) -> Result<LpSolution> {
    let dim = h.ncols();
    if c.len() != dim {
        return Err(Error::dim("lp_max: objective", dim, c.len()));
    }
    if b.len() != h.nrows() {
        return Err(Error::dim("lp_max: bounds", h.nrows(), b.len()));
    }
    let z0 = match start {
        Some(z) => {
            if z.len() != dim {
                return Err(Error::dim("lp_max: start", dim, z.len()));
            }
            z.clone()
        }
        None => feasible_point(h, b)?,
    };
    ActiveSetLp::new(h, b, c).run(z0)
}

/// Finds a point of `{H z <= b}` by maximizing a uniform slack `s` in
/// `H z + s |H_i| <= b`, `s <= 1`. Returns the point and the achieved slack;
/// a positive slack means the point is strictly interior.
pub fn chebyshev_point(h: &DMatrix<f64>, b: &DVector<f64>, cap: f64) -> Result<(DVector<f64>, f64)> {
    let (rows, dim) = h.shape();
    if b.len() != rows {
        return Err(Error::dim("chebyshev_point: bounds", rows, b.len()));
    }
    let mut ext = DMatrix::zeros(rows + 1, dim + 1);
    let mut eb = DVector::zeros(rows + 1);
    for i in 0..rows {
        let norm = h.row(i).norm();
        for j in 0..dim {
            ext[(i, j)] = h[(i, j)];
        }
        ext[(i, dim)] = norm;
        eb[i] = b[i];
    }
    ext[(rows, dim)] = 1.0;
    eb[rows] = cap;
    let s0 = b.iter().zip(h.row_iter()).map(|(bi, r)| bi / r.norm().max(1e-300)).fold(cap, f64::min) - 1.0;
    let mut start = DVector::zeros(dim + 1);
    start[dim] = s0;
    let mut c = DVector::zeros(dim + 1);
    c[dim] = 1.0;
    let sol = ActiveSetLp::new(&ext, &eb, &c).run(start)?;
    Ok((sol.argmax.rows(0, dim).into_owned(), sol.value))
}

fn feasible_point(h: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.iter().all(|bi| *bi >= 0.0) {
        return Ok(DVector::zeros(h.ncols()));
    }
    let (z, slack) = chebyshev_point(h, b, 1.0)?;
    if slack < -FEAS_TOL {
        return Err(Error::Infeasible);
    }
    Ok(z)
}

struct ActiveSetLp<'a> {
    h: &'a DMatrix<f64>,
    b: &'a DVector<f64>,
    c: &'a DVector<f64>,
}

impl<'a> ActiveSetLp<'a> {
    fn new(h: &'a DMatrix<f64>, b: &'a DVector<f64>, c: &'a DVector<f64>) -> Self {
        Self { h, b, c }
    }

    fn run(&self, mut z: DVector<f64>) -> Result<LpSolution> {
        let (rows, dim) = self.h.shape();
        let c_norm = self.c.norm().max(1.0);
        let mut working: Vec<usize> = Vec::with_capacity(dim);
        let max_iter = 50 * (rows + dim) + 100;
        // Bland's rule after a run of degenerate (zero-length) steps.
        let mut degenerate_run = 0usize;

        for iteration in 0..max_iter {
            let bland = degenerate_run > 2 * dim;
            let (p, lambda) = self.project(&working);
            if p.norm() <= 1e-13 * c_norm {
                let leaving = if bland {
                    (0..working.len())
                        .filter(|&k| lambda[k] < -DUAL_TOL * c_norm)
                        .min_by_key(|&k| working[k])
                } else {
                    (0..working.len())
                        .filter(|&k| lambda[k] < -DUAL_TOL * c_norm)
                        .min_by(|&a, &b| lambda[a].total_cmp(&lambda[b]))
                };
                match leaving {
                    Some(k) => {
                        working.remove(k);
                        continue;
                    }
                    None => {
                        let mut resid = self.c.clone();
                        for (k, &i) in working.iter().enumerate() {
                            resid -= self.h.row(i).transpose() * lambda[k];
                        }
                        return Ok(LpSolution {
                            value: self.c.dot(&z),
                            active: working.iter().copied().zip(lambda.iter().copied()).collect(),
                            argmax: z,
                            iterations: iteration,
                            dual_residual: resid.amax(),
                        });
                    }
                }
            }

            // Ratio test along p.
            let hp = self.h * &p;
            let hz = self.h * &z;
            let p_norm = p.norm();
            let mut step = f64::INFINITY;
            let mut entering: Option<usize> = None;
            for i in 0..rows {
                if hp[i] <= DIR_TOL * p_norm || working.contains(&i) {
                    continue;
                }
                let slack = (self.b[i] - hz[i]).max(0.0);
                let alpha = slack / hp[i];
                let better = match entering {
                    None => true,
                    Some(_) if alpha < step - 1e-15 * (1.0 + step.abs()) => true,
                    // Ties: lowest index under Bland, otherwise the row most
                    // aligned with p for a better-conditioned working set.
                    Some(j) if alpha <= step + 1e-15 * (1.0 + step.abs()) => !bland && hp[i] > hp[j],
                    _ => false,
                };
                if better {
                    step = alpha;
                    entering = Some(i);
                }
            }
            let Some(i) = entering else {
                return Err(Error::Unbounded {
                    direction: p.as_slice().to_vec(),
                });
            };
            if step * p_norm <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            z.axpy(step, &p, 1.0);
            working.push(i);
        }
        Err(Error::Numerical(format!(
            "LP did not terminate within {max_iter} iterations"
        )))
    }

    /// Projects `c` onto the null space of the working rows and returns the
    /// least-squares multipliers of `c` on those rows.
    fn project(&self, working: &[usize]) -> (DVector<f64>, DVector<f64>) {
        if working.is_empty() {
            return (self.c.clone(), DVector::zeros(0));
        }
        let dim = self.h.ncols();
        let k = working.len();
        let mut hw_t = DMatrix::zeros(dim, k);
        for (col, &i) in working.iter().enumerate() {
            hw_t.set_column(col, &self.h.row(i).transpose());
        }
        let qr = hw_t.qr();
        let q = qr.q();
        let r = qr.r();
        let qtc = q.transpose() * self.c;
        let mut p = self.c - &q * &qtc;
        // One reorthogonalization pass keeps p clean of the working rows.
        let corr = q.transpose() * &p;
        p -= &q * corr;
        let lambda = r
            .solve_upper_triangular(&qtc)
            .unwrap_or_else(|| DVector::from_element(k, 0.0));
        (p, lambda)
    }
}
