//! H-representation polytopes `{z : H z <= h}` and the safe sets built from them.

pub mod io;
pub mod lp;
pub mod reduce;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LinearSystem;

pub use lp::{lp_max, LpSolution};

/// Rows are unit-normalized on construction so tolerances are distances.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    h: DMatrix<f64>,
    b: DVector<f64>,
}

impl Polytope {
    /// Builds a polytope, scaling each row to unit Euclidean norm.
    ///
    /// All-zero rows are dropped when their bound is nonnegative and rejected
    /// otherwise.
    pub fn new(h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(Error::dim("Polytope: bound vector", h.nrows(), b.len()));
        }
        if h.ncols() == 0 {
            return Err(Error::InvalidConfig("polytope dimension must be positive".into()));
        }
        let dim = h.ncols();
        let mut rows = Vec::with_capacity(h.nrows());
        for i in 0..h.nrows() {
            let norm = h.row(i).norm();
            if norm == 0.0 {
                if b[i] < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "row {i} is identically zero with negative bound {}",
                        b[i]
                    )));
                }
                continue;
            }
            rows.push((h.row(i).map(|e| e / norm), b[i] / norm));
        }
        Ok(Self::from_rows(dim, rows))
    }

    /// Takes rows as given. Used for data that is already normalized (loaded
    /// files, internal transforms) so values round-trip bit for bit.
    pub fn from_normalized(h: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if h.nrows() != b.len() {
            return Err(Error::dim("Polytope: bound vector", h.nrows(), b.len()));
        }
        if h.ncols() == 0 {
            return Err(Error::InvalidConfig("polytope dimension must be positive".into()));
        }
        for i in 0..h.nrows() {
            if b[i] < 0.0 && h.row(i).iter().all(|e| *e == 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "row {i} is identically zero with negative bound"
                )));
            }
        }
        Ok(Self { h, b })
    }

    fn from_rows(dim: usize, rows: Vec<(nalgebra::RowDVector<f64>, f64)>) -> Self {
        let mut h = DMatrix::zeros(rows.len(), dim);
        let mut b = DVector::zeros(rows.len());
        for (i, (row, bound)) in rows.into_iter().enumerate() {
            h.set_row(i, &row);
            b[i] = bound;
        }
        Self { h, b }
    }

    /// The axis-aligned box `|z_i| <= half_width`.
    pub fn cube(dim: usize, half_width: f64) -> Self {
        let mut h = DMatrix::zeros(2 * dim, dim);
        for i in 0..dim {
            h[(2 * i, i)] = 1.0;
            h[(2 * i + 1, i)] = -1.0;
        }
        Self {
            h,
            b: DVector::from_element(2 * dim, half_width),
        }
    }

    pub fn dim(&self) -> usize {
        self.h.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h.nrows()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// `max_i (H z - h)_i`, or `-inf` for a polytope without rows.
    pub fn max_violation(&self, z: &DVector<f64>) -> f64 {
        (&self.h * z - &self.b).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        debug_assert_eq!(z.len(), self.dim());
        self.max_violation(z) <= tol
    }

    pub fn lp_max(&self, c: &DVector<f64>) -> Result<LpSolution> {
        lp::lp_max(&self.h, &self.b, c, None)
    }

    /// A feasible point for warm-starting many LPs over the same set.
    pub fn feasible_point(&self) -> Result<DVector<f64>> {
        if self.b.iter().all(|bi| *bi >= 0.0) {
            return Ok(DVector::zeros(self.dim()));
        }
        let (z, slack) = lp::chebyshev_point(&self.h, &self.b, 1.0)?;
        if slack < -lp::FEAS_TOL {
            return Err(Error::Infeasible);
        }
        Ok(z)
    }

    /// Center and radius of a large inscribed ball (radius capped at `cap`).
    pub fn chebyshev_center(&self, cap: f64) -> Result<(DVector<f64>, f64)> {
        lp::chebyshev_point(&self.h, &self.b, cap)
    }

    /// Checks `self ⊆ other` row by row: `max{g.z : z in self} <= c + tol`
    /// for every row `(g, c)` of `other`.
    pub fn is_subset(&self, other: &Polytope, tol: f64) -> Result<SubsetReport> {
        if self.dim() != other.dim() {
            return Err(Error::dim("is_subset", self.dim(), other.dim()));
        }
        let start = self.feasible_point()?;
        let values: Vec<Result<Option<f64>>> = (0..other.rows())
            .into_par_iter()
            .map(|j| {
                let g = other.h.row(j).transpose();
                match lp::lp_max(&self.h, &self.b, &g, Some(&start)) {
                    Ok(sol) => Ok(Some(sol.value - other.b[j])),
                    Err(Error::Unbounded { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect();
        let mut report = SubsetReport {
            subset: true,
            unbounded: false,
            worst_excess: f64::NEG_INFINITY,
            worst_row: None,
        };
        for (j, v) in values.into_iter().enumerate() {
            match v? {
                None => {
                    report.subset = false;
                    report.unbounded = true;
                    report.worst_excess = f64::INFINITY;
                    report.worst_row = Some(j);
                }
                Some(excess) => {
                    if excess > report.worst_excess {
                        report.worst_excess = excess;
                        if !report.unbounded {
                            report.worst_row = Some(j);
                        }
                    }
                    if excess > tol {
                        report.subset = false;
                    }
                }
            }
        }
        Ok(report)
    }

    /// Slack of row `i` against the polytope made of the rows in `keep`
    /// (excluding `i`): `max{H_i z} - h_i`, `+inf` when unbounded.
    fn row_slack(&self, i: usize, keep: &[bool], start: &DVector<f64>) -> Result<f64> {
        let idx: Vec<usize> = (0..self.rows()).filter(|&j| j != i && keep[j]).collect();
        let h = self.h.select_rows(idx.iter());
        let b = self.b.select_rows(idx.iter());
        let c = self.h.row(i).transpose();
        match lp::lp_max(&h, &b, &c, Some(start)) {
            Ok(sol) => Ok(sol.value - self.b[i]),
            Err(Error::Unbounded { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    }

    /// Removes redundant and almost-redundant rows.
    ///
    /// Row `i` goes when `max{H_i z : z in P without i} - h_i <= threshold`.
    /// Candidates are visited by increasing `slack / |h_i|`; removal is
    /// sequential, so each test sees the already-pruned set. With a positive
    /// threshold the result may be a strict superset of `self`.
    pub fn drop_near_redundant(&self, threshold: f64) -> Result<Polytope> {
        if !(threshold >= 0.0) {
            return Err(Error::InvalidConfig(format!("slack threshold must be >= 0, got {threshold}")));
        }
        let rows = self.rows();
        if rows == 0 {
            return Ok(self.clone());
        }
        let start = self.feasible_point()?;
        let all = vec![true; rows];
        let initial: Vec<f64> = (0..rows)
            .into_par_iter()
            .map(|i| self.row_slack(i, &all, &start))
            .collect::<Result<_>>()?;

        let cutoff = threshold + REDUNDANCY_TOL;
        let mut order: Vec<usize> = (0..rows).filter(|&i| initial[i] <= cutoff).collect();
        order.sort_by(|&a, &b| {
            let ka = initial[a] / self.b[a].abs().max(1e-12);
            let kb = initial[b] / self.b[b].abs().max(1e-12);
            ka.total_cmp(&kb).then(a.cmp(&b))
        });

        // Dropping rows only enlarges the set, so slacks only grow: rows over
        // the cutoff initially can never become removable.
        let mut keep = all;
        for i in order {
            if self.row_slack(i, &keep, &start)? <= cutoff {
                keep[i] = false;
            }
        }
        Ok(self.subset_rows(&keep))
    }

    pub fn subset_rows(&self, keep: &[bool]) -> Polytope {
        let idx: Vec<usize> = (0..self.rows()).filter(|&i| keep[i]).collect();
        Polytope {
            h: self.h.select_rows(idx.iter()),
            b: self.b.select_rows(idx.iter()),
        }
    }

    /// Scales the set toward `center`: `{z : H z <= f h + (1 - f) H c}`.
    pub fn pull_in(&self, center: &DVector<f64>, factor: f64) -> Result<Polytope> {
        if center.len() != self.dim() {
            return Err(Error::dim("pull_in: center", self.dim(), center.len()));
        }
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::InvalidConfig(format!("pull-in factor must be in (0, 1], got {factor}")));
        }
        let hc = &self.h * center;
        let margin = (&hc - &self.b).max();
        if !(margin < 0.0) {
            return Err(Error::NotInterior(margin));
        }
        if factor == 1.0 {
            return Ok(self.clone());
        }
        let b = &self.b * factor + hc * (1.0 - factor);
        Ok(Polytope { h: self.h.clone(), b })
    }
}

/// Rows whose computed slack is within this of the threshold count as
/// removable; absorbs LP round-off on weakly redundant rows.
const REDUNDANCY_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetReport {
    pub subset: bool,
    /// Some LP over the candidate subset was unbounded.
    pub unbounded: bool,
    /// Largest `max{g.z} - c` over the rows of the containing set.
    pub worst_excess: f64,
    pub worst_row: Option<usize>,
}

/// Violation of a command-free row tolerated before a cross-section is
/// declared empty; states can sit on such a face up to round-off.
pub const STATE_ROW_TOL: f64 = 1e-10;

/// A polytope in the stacked `(x, v)` space with the split remembered.
#[derive(Debug, Clone)]
pub struct SafeSet {
    poly: Polytope,
    n: usize,
    m: usize,
    invariant: bool,
    split: SectionSplit,
}

/// Column split of the rows, rescaled by the norm of the command part so
/// that every cross-section comes out unit-normalized without per-step work.
#[derive(Debug, Clone)]
struct SectionSplit {
    hx: DMatrix<f64>,
    hv: DMatrix<f64>,
    b: DVector<f64>,
    /// Rows with no command dependence: `hx_only x <= b_only`.
    hx_only: DMatrix<f64>,
    b_only: DVector<f64>,
}

impl SectionSplit {
    fn new(poly: &Polytope, n: usize) -> Self {
        let m = poly.dim() - n;
        let mut cmd_rows = Vec::new();
        let mut state_rows = Vec::new();
        for i in 0..poly.rows() {
            let hv = poly.h.view((i, n), (1, m));
            let norm = hv.norm();
            if norm == 0.0 {
                state_rows.push(i);
            } else {
                cmd_rows.push((i, norm));
            }
        }
        let mut hx = DMatrix::zeros(cmd_rows.len(), n);
        let mut hv = DMatrix::zeros(cmd_rows.len(), m);
        let mut b = DVector::zeros(cmd_rows.len());
        for (k, &(i, norm)) in cmd_rows.iter().enumerate() {
            hx.set_row(k, &(poly.h.fixed_rows::<1>(i).columns(0, n) / norm));
            hv.set_row(k, &(poly.h.fixed_rows::<1>(i).columns(n, m) / norm));
            b[k] = poly.b[i] / norm;
        }
        let hx_only = poly.h.select_rows(state_rows.iter()).columns(0, n).into_owned();
        let b_only = poly.b.select_rows(state_rows.iter());
        Self {
            hx,
            hv,
            b,
            hx_only,
            b_only,
        }
    }
}

/// Commands admissible at one state, or the attainable steady commands.
#[derive(Debug, Clone)]
pub struct CrossSection {
    pub poly: Polytope,
    /// Set when a row without command dependence is violated, i.e. no
    /// command is admissible.
    pub empty: bool,
}

impl CrossSection {
    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        !self.empty && self.poly.contains(v, tol)
    }
}

impl SafeSet {
    pub fn new(poly: Polytope, n: usize, m: usize, invariant: bool) -> Result<Self> {
        if poly.dim() != n + m {
            return Err(Error::dim("SafeSet: polytope dimension", n + m, poly.dim()));
        }
        if m == 0 {
            return Err(Error::InvalidConfig("SafeSet needs at least one command component".into()));
        }
        let split = SectionSplit::new(&poly, n);
        Ok(Self {
            poly,
            n,
            m,
            invariant,
            split,
        })
    }

    pub fn poly(&self) -> &Polytope {
        &self.poly
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// True only for the full finitely determined invariant set.
    pub fn is_invariant(&self) -> bool {
        self.invariant
    }

    pub fn rows(&self) -> usize {
        self.poly.rows()
    }

    pub fn stack(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n + self.m, x.iter().chain(v.iter()).copied())
    }

    pub fn contains(&self, x: &DVector<f64>, v: &DVector<f64>, tol: f64) -> bool {
        self.poly.contains(&self.stack(x, v), tol)
    }

    /// `{v : H_v v <= h - H_x x}`.
    pub fn cross_section(&self, x: &DVector<f64>) -> Result<CrossSection> {
        if x.len() != self.n {
            return Err(Error::dim("cross_section: state", self.n, x.len()));
        }
        let s = &self.split;
        let empty = s.b_only.len() > 0 && (&s.hx_only * x - &s.b_only).max() > STATE_ROW_TOL;
        let b = &s.b - &s.hx * x;
        Ok(CrossSection {
            poly: Polytope { h: s.hv.clone(), b },
            empty,
        })
    }

    /// Bound vector of the cross-section only; the normals are
    /// [`SafeSet::section_normals`]. Avoids cloning the normals every step.
    pub fn section_bounds(&self, x: &DVector<f64>) -> (DVector<f64>, bool) {
        let s = &self.split;
        let empty = s.b_only.len() > 0 && (&s.hx_only * x - &s.b_only).max() > STATE_ROW_TOL;
        (&s.b - &s.hx * x, empty)
    }

    pub fn section_normals(&self) -> &DMatrix<f64> {
        &self.split.hv
    }

    /// `R_P = {v : (x_v, v) in P}` with `x_v = (I - A)^{-1} B v`.
    pub fn steady_state_set(&self, sys: &LinearSystem) -> Result<CrossSection> {
        if sys.n() != self.n || sys.m() != self.m {
            return Err(Error::dim("steady_state_set: system", self.n, sys.n()));
        }
        let hx = self.poly.h.columns(0, self.n);
        let hv = self.poly.h.columns(self.n, self.m);
        let g = hx * sys.dc_gain() + hv;
        let mut rows = Vec::new();
        let mut empty = false;
        for i in 0..g.nrows() {
            let norm = g.row(i).norm();
            if norm == 0.0 {
                if self.poly.b[i] < 0.0 {
                    empty = true;
                }
                continue;
            }
            rows.push((g.row(i) / norm, self.poly.b[i] / norm));
        }
        Ok(CrossSection {
            poly: Polytope::from_rows(self.m, rows),
            empty,
        })
    }

    /// Same rows under a new invariance tag.
    pub fn with_invariant(self, invariant: bool) -> Self {
        Self { invariant, ..self }
    }
}
