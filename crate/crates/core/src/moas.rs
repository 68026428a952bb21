//! Finitely determined inner approximation of the maximal output admissible set.
//!
//! The set collects, for horizons `t = 0, 1, ..., t*`, the constraints on the
//! response `x(t) = A^t x + sum_{j<t} A^j B v` to a constant command, plus
//! the steady-state constraints tightened to `(1 - epsilon) gamma`. A horizon
//! row that is already implied by the accumulated rows is not stored; the
//! construction stops at the first horizon whose rows are all implied.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConstraintMap, LinearSystem};
use crate::polytope::{lp, Polytope, SafeSet};

/// Rows closer than this (normals and bounds, after unit scaling) are merged.
const DEDUP_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoasConfig {
    /// Steady-state tightening fraction, `0 < epsilon < 1`.
    pub epsilon: f64,
    /// Largest horizon searched for finite determination.
    pub t_max: usize,
    /// A row counts as implied when its LP maximum exceeds the bound by at
    /// most this much.
    pub tol: f64,
}

impl Default for MoasConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            t_max: 500,
            tol: 1e-9,
        }
    }
}

impl MoasConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        if self.t_max < 1 {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be >= 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Moas {
    pub set: SafeSet,
    pub t_star: usize,
    /// Largest `LP max - bound` over the rows of horizon `t* + 1`.
    pub certificate_excess: f64,
    pub construction_ms: f64,
}

/// JSON sidecar written next to the polytope file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MoasSidecar {
    pub t_star: usize,
    pub epsilon: f64,
    pub row_count: usize,
    pub construction_ms: f64,
    pub n: usize,
    pub m: usize,
    pub invariant: bool,
}

impl Moas {
    pub fn sidecar(&self, epsilon: f64) -> MoasSidecar {
        MoasSidecar {
            t_star: self.t_star,
            epsilon,
            row_count: self.set.rows(),
            construction_ms: self.construction_ms,
            n: self.set.n(),
            m: self.set.m(),
            invariant: self.set.is_invariant(),
        }
    }
}

/// Rows of the constraints at horizon `t` given `A^t` and `sum_{j<t} A^j B`.
fn horizon_rows(
    cm: &ConstraintMap,
    a_pow: &DMatrix<f64>,
    b_sum: &DMatrix<f64>,
) -> Vec<(RowDVector<f64>, f64)> {
    let hx = cm.gamma_mat() * cm.cc() * a_pow;
    let hv = cm.gamma_mat() * (cm.cc() * b_sum + cm.dc());
    (0..cm.rows())
        .filter_map(|i| {
            let row = RowDVector::from_iterator(
                hx.ncols() + hv.ncols(),
                hx.row(i).iter().chain(hv.row(i).iter()).copied(),
            );
            normalize(row, cm.gamma()[i])
        })
        .collect()
}

fn normalize(row: RowDVector<f64>, bound: f64) -> Option<(RowDVector<f64>, f64)> {
    let norm = row.norm();
    (norm > 0.0).then(|| (row / norm, bound / norm))
}

struct RowSet {
    rows: Vec<(RowDVector<f64>, f64)>,
}

impl RowSet {
    fn has_duplicate(&self, row: &RowDVector<f64>, bound: f64) -> bool {
        self.rows
            .iter()
            .any(|(r, b)| (b - bound).abs() <= DEDUP_TOL && (r - row).amax() <= DEDUP_TOL)
    }

    fn matrices(&self, dim: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(self.rows.len(), dim);
        let mut b = DVector::zeros(self.rows.len());
        for (i, (r, bound)) in self.rows.iter().enumerate() {
            h.set_row(i, r);
            b[i] = *bound;
        }
        (h, b)
    }

    fn push_unique(&mut self, row: RowDVector<f64>, bound: f64) {
        if !self.has_duplicate(&row, bound) {
            self.rows.push((row, bound));
        }
    }
}

/// Excess `max{row.z} - bound` over `{H z <= b}`; `+inf` if unbounded.
fn excess(h: &DMatrix<f64>, b: &DVector<f64>, row: &RowDVector<f64>, bound: f64, start: &DVector<f64>) -> Result<f64> {
    match lp::lp_max(h, b, &row.transpose(), Some(start)) {
        Ok(sol) => Ok(sol.value - bound),
        Err(Error::Unbounded { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn build_moas(sys: &LinearSystem, cm: &ConstraintMap, cfg: &MoasConfig) -> Result<Moas> {
    cfg.validate()?;
    cm.compatible_with(sys)?;
    let started = Instant::now();
    let (n, m) = (sys.n(), sys.m());
    let dim = n + m;

    let mut set = RowSet { rows: Vec::new() };
    let mut a_pow = DMatrix::<f64>::identity(n, n);
    let mut b_sum = DMatrix::<f64>::zeros(n, m);
    for (row, bound) in horizon_rows(cm, &a_pow, &b_sum) {
        set.push_unique(row, bound);
    }
    let ss = cm.gamma_mat() * (cm.cc() * sys.dc_gain() + cm.dc());
    for i in 0..ss.nrows() {
        let row = RowDVector::from_iterator(dim, std::iter::repeat_n(0.0, n).chain(ss.row(i).iter().copied()));
        if let Some((row, bound)) = normalize(row, (1.0 - cfg.epsilon) * cm.gamma()[i]) {
            set.push_unique(row, bound);
        }
    }

    // The origin is strictly inside every row (gamma > 0).
    let origin = DVector::zeros(dim);
    let mut last_excess = f64::INFINITY;
    for t in 1..=cfg.t_max {
        b_sum += &a_pow * sys.b();
        a_pow = sys.a() * &a_pow;
        let candidates: Vec<_> = horizon_rows(cm, &a_pow, &b_sum)
            .into_iter()
            .filter(|(r, b)| !set.has_duplicate(r, *b))
            .collect();
        let (h, b) = set.matrices(dim);
        let excesses: Vec<f64> = candidates
            .par_iter()
            .map(|(row, bound)| excess(&h, &b, row, *bound, &origin))
            .collect::<Result<_>>()?;
        last_excess = excesses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut added = false;
        for ((row, bound), e) in candidates.into_iter().zip(excesses) {
            if e > cfg.tol {
                set.push_unique(row, bound);
                added = true;
            }
        }
        if !added {
            let (h, b) = set.matrices(dim);
            return Ok(Moas {
                set: SafeSet::new(Polytope::from_normalized(h, b)?, n, m, true)?,
                t_star: t - 1,
                certificate_excess: last_excess,
                construction_ms: started.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    let (h, b) = set.matrices(dim);
    Err(Error::FiniteDetermination {
        t_max: cfg.t_max,
        max_violation: last_excess,
        partial: Box::new(Polytope::from_normalized(h, b)?),
    })
}

/// Re-checks finite determination of a constructed set: every constraint row
/// at horizon `t + 1` must be implied. Returns the largest excess.
pub fn determination_excess(set: &SafeSet, sys: &LinearSystem, cm: &ConstraintMap, t: usize) -> Result<f64> {
    let (n, m) = (sys.n(), sys.m());
    let mut a_pow = DMatrix::<f64>::identity(n, n);
    let mut b_sum = DMatrix::<f64>::zeros(n, m);
    for _ in 0..=t {
        b_sum += &a_pow * sys.b();
        a_pow = sys.a() * &a_pow;
    }
    let start = set.poly().feasible_point()?;
    let (h, b) = (set.poly().h(), set.poly().b());
    horizon_rows(cm, &a_pow, &b_sum)
        .par_iter()
        .map(|(row, bound)| excess(h, b, row, *bound, &start))
        .try_reduce(|| f64::NEG_INFINITY, |a, b| Ok(a.max(b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub samples: usize,
    /// Sampled points whose one-step successor leaves the set.
    pub exits: usize,
    /// Largest row violation among the successors, `-inf` with no samples.
    pub worst_exit_margin: f64,
    /// Smallest sampled radius of a state ball around `x_v` (with `v` fixed)
    /// that stays inside the set, over samples whose `v` is a steady command.
    /// `None` when no sample qualified.
    pub a3_radius_estimate: Option<f64>,
}

/// Samples the set by hit-and-run, steps every sample once under its own
/// command and counts the successors that leave the set.
pub fn verify_invariance(set: &SafeSet, sys: &LinearSystem, samples: usize, tol: f64, seed: u64) -> Result<InvarianceReport> {
    if sys.n() != set.n() || sys.m() != set.m() {
        return Err(Error::dim("verify_invariance: system", set.n(), sys.n()));
    }
    let mut report = InvarianceReport {
        samples,
        exits: 0,
        worst_exit_margin: f64::NEG_INFINITY,
        a3_radius_estimate: None,
    };
    if samples == 0 {
        return Ok(report);
    }
    let poly = set.poly();
    let (center, radius) = poly.chebyshev_center(1e3).map_err(|_| Error::Sampling)?;
    if !(radius > 0.0) {
        return Err(Error::Sampling);
    }
    let rp = set.steady_state_set(sys)?;
    let (n, m) = (set.n(), set.m());
    let hx_norms: Vec<f64> = (0..poly.rows()).map(|i| poly.h().view((i, 0), (1, n)).norm()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampler = HitAndRun::new(poly, center);
    let thin = poly.dim();
    for _ in 0..10 * thin {
        sampler.advance(&mut rng);
    }
    for _ in 0..samples {
        for _ in 0..thin {
            sampler.advance(&mut rng);
        }
        let z = &sampler.z;
        let x = z.rows(0, n).into_owned();
        let v = z.rows(n, m).into_owned();
        let next = sys.step(&x, &v)?;
        let margin = poly.max_violation(&set.stack(&next, &v));
        report.worst_exit_margin = report.worst_exit_margin.max(margin);
        if margin > tol {
            report.exits += 1;
        }
        if rp.contains(&v, 0.0) {
            let xv = sys.equilibrium(&v)?;
            let slack = poly.b() - poly.h() * set.stack(&xv, &v);
            let r = (0..poly.rows())
                .filter(|&i| hx_norms[i] > 0.0)
                .map(|i| slack[i] / hx_norms[i])
                .fold(f64::INFINITY, f64::min)
                .max(0.0);
            report.a3_radius_estimate = Some(report.a3_radius_estimate.map_or(r, |cur: f64| cur.min(r)));
        }
    }
    Ok(report)
}

/// Hit-and-run random walk inside a polytope; chords are clipped to
/// `CHORD_CAP` in unbounded directions.
pub(crate) struct HitAndRun<'a> {
    poly: &'a Polytope,
    pub z: DVector<f64>,
}

const CHORD_CAP: f64 = 1e6;

impl<'a> HitAndRun<'a> {
    pub(crate) fn new(poly: &'a Polytope, start: DVector<f64>) -> Self {
        Self { poly, z: start }
    }

    pub(crate) fn advance<R: Rng>(&mut self, rng: &mut R) {
        let dim = self.poly.dim();
        let mut d = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = d.norm();
        if norm == 0.0 {
            return;
        }
        d /= norm;
        let hd = self.poly.h() * &d;
        let slack = self.poly.b() - self.poly.h() * &self.z;
        let (mut lo, mut hi) = (-CHORD_CAP, CHORD_CAP);
        for i in 0..hd.len() {
            let s = slack[i].max(0.0);
            if hd[i] > 0.0 {
                hi = hi.min(s / hd[i]);
            } else if hd[i] < 0.0 {
                lo = lo.max(s / hd[i]);
            }
        }
        if hi > lo {
            let t = rng.random_range(lo..=hi);
            self.z.axpy(t, &d, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn scalar() -> (LinearSystem, ConstraintMap) {
        let sys = LinearSystem::from_rows(1, 1, &[0.5], &[0.5]).unwrap();
        let cm = ConstraintMap::from_intervals(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
            &[(-1.0, 1.0)],
        )
        .unwrap();
        (sys, cm)
    }

    #[test]
    fn scalar_membership() {
        let (sys, cm) = scalar();
        let moas = build_moas(&sys, &cm, &MoasConfig::default()).unwrap();
        assert!(moas.set.is_invariant());
        assert!(moas.t_star <= 25);
        assert!(moas.set.contains(&dv(&[0.9]), &dv(&[-0.9]), 1e-12));
        assert!(!moas.set.contains(&dv(&[1.05]), &dv(&[0.0]), 1e-12));
        assert!(!moas.set.contains(&dv(&[0.0]), &dv(&[0.9995]), 1e-12));
        assert!(moas.certificate_excess <= 1e-9);
    }

    #[test]
    fn memoryless_constraint_stops_at_zero() {
        let sys = LinearSystem::from_rows(2, 1, &[0.5, 0.1, 0.0, 0.3], &[1.0, 0.5]).unwrap();
        let cm = ConstraintMap::from_intervals(
            DMatrix::zeros(1, 2),
            DMatrix::from_element(1, 1, 2.0),
            &[(-1.0, 3.0)],
        )
        .unwrap();
        let moas = build_moas(&sys, &cm, &MoasConfig::default()).unwrap();
        assert_eq!(moas.t_star, 0);
        // 2v <= 3 and -2v <= 1 with their tightened copies.
        assert_eq!(moas.set.rows(), 4);
        assert!(moas.set.contains(&dv(&[100.0, -50.0]), &dv(&[1.49]), 1e-12));
        assert!(!moas.set.contains(&dv(&[0.0, 0.0]), &dv(&[1.4999]), 1e-12));
    }

    #[test]
    fn finite_determination_failure_carries_partial_set() {
        // Lightly damped oscillator: the response overshoots for many steps.
        let (c, s) = (0.99 * 0.3f64.cos(), 0.99 * 0.3f64.sin());
        let sys = LinearSystem::from_rows(2, 1, &[c, -s, s, c], &[1.0, 0.0]).unwrap();
        let cm = ConstraintMap::from_intervals(
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
            &[(-1.0, 1.0)],
        )
        .unwrap();
        let cfg = MoasConfig {
            epsilon: 1e-6,
            t_max: 3,
            tol: 0.0,
        };
        match build_moas(&sys, &cm, &cfg) {
            Err(Error::FiniteDetermination { partial, max_violation, .. }) => {
                assert!(partial.rows() >= 2);
                assert!(max_violation > 0.0);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn invalid_config() {
        let (sys, cm) = scalar();
        for cfg in [
            MoasConfig { epsilon: 0.0, ..Default::default() },
            MoasConfig { epsilon: 1.0, ..Default::default() },
            MoasConfig { t_max: 0, ..Default::default() },
        ] {
            assert!(matches!(build_moas(&sys, &cm, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn scalar_set_is_invariant_under_sampling() {
        let (sys, cm) = scalar();
        let moas = build_moas(&sys, &cm, &MoasConfig::default()).unwrap();
        let rep = verify_invariance(&moas.set, &sys, 1000, 1e-9, 0).unwrap();
        assert_eq!(rep.exits, 0);
        assert!(rep.a3_radius_estimate.is_some());
        let empty = verify_invariance(&moas.set, &sys, 0, 1e-9, 0).unwrap();
        assert_eq!(empty.exits, 0);
    }

    #[test]
    fn box_set_for_scalar_system_is_not_invariant() {
        let (sys, _) = scalar();
        // |x| <= 0.5, |v| <= 0.9: (0.5, 0.9) steps to 0.7.
        let p = Polytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]),
            dv(&[0.5, 0.5, 0.9, 0.9]),
        )
        .unwrap();
        let set = SafeSet::new(p, 1, 1, false).unwrap();
        let rep = verify_invariance(&set, &sys, 2000, 1e-9, 7).unwrap();
        assert!(rep.exits > 0);
        assert!(rep.worst_exit_margin > 0.0);
    }
}
