//! Governor step laws.
//!
//! All four laws work on the cross-section `P_x = {v : (x, v) in P}` of a safe
//! set. The conventional CG solves the projection to optimality and needs an
//! invariant `P`; the modified CG and the inexact-solver algorithm accept any
//! candidate that passes the progress test of [`accept_or_hold`] and
//! otherwise keep the previous command.

use std::sync::Arc;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LinearSystem;
use crate::polytope::{CrossSection, SafeSet};
use crate::qp::{ActiveSetQp, QpResult, Weight};

/// Slack on the right side of the progress inequality.
pub const ACCEPT_TOL: f64 = 1e-12;
/// Feasibility tolerance for candidates, on unit-normalized section rows.
pub const SECTION_TOL: f64 = 1e-10;
/// Row slacks above `-LINE_TOL` count as zero in the line search, so that a
/// command sitting on a face up to round-off can still move along it.
const LINE_TOL: f64 = 1e-12;
/// Iteration cap used wherever a solve is meant to be exact.
pub const EXACT_CAP: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Srg,
    CgExact,
    CgModified,
    Algorithm1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `|r - v|_Q^2`.
    Projection,
    /// `|r - v|_Q^2 + |v_prev - v|_Q^2`.
    Biobjective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    ActiveSet,
    CoordinateDescent,
}

/// Which reference the progress inequality of the inexact-solver algorithm
/// measures against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceTarget {
    #[default]
    R,
    RStar,
}

#[derive(Debug, Clone)]
pub struct GovernorConfig {
    pub weight: Weight,
    pub variant: Variant,
    pub objective: Objective,
    pub solver: SolverKind,
    pub max_iter: usize,
    /// State-proximity trigger of the fallback.
    pub eps_prime: f64,
    /// Minimum-progress radius (Q-norm) below which the fallback may fire.
    pub delta_prime: f64,
    /// Fallback step length (Euclidean).
    pub delta_dprime: f64,
    pub n_period: usize,
    pub acceptance_target: AcceptanceTarget,
}

impl GovernorConfig {
    pub fn new(variant: Variant, m: usize) -> Self {
        Self {
            weight: Weight::identity(m),
            variant,
            objective: Objective::Projection,
            solver: SolverKind::ActiveSet,
            max_iter: 200,
            eps_prime: 1e-2,
            delta_prime: 0.05,
            delta_dprime: 0.05,
            n_period: m + 1,
            acceptance_target: AcceptanceTarget::R,
        }
    }

    pub fn m(&self) -> usize {
        self.weight.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive and finite, got {x}")))
            }
        };
        positive("eps_prime", self.eps_prime)?;
        positive("delta_prime", self.delta_prime)?;
        positive("delta_dprime", self.delta_dprime)?;
        if self.n_period == 0 {
            return Err(Error::InvalidConfig("n_period must be at least 1".into()));
        }
        if self.weight.is_identity() && (self.delta_prime - self.delta_dprime).abs() > 1e-15 * self.delta_dprime {
            return Err(Error::InvalidConfig(format!(
                "with Q = I delta_prime must equal delta_dprime ({} vs {})",
                self.delta_prime, self.delta_dprime
            )));
        }
        if self.solver == SolverKind::CoordinateDescent && self.variant == Variant::CgExact {
            return Err(Error::InvalidConfig("the exact CG needs the active-set solver".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GovernorState {
    pub v_prev: DVector<f64>,
    /// Active rows of the last solve, fed back as a warm start.
    pub warm_start: Vec<usize>,
    pub cycle_index: usize,
    /// Last `(r, r*)` pair; `r*` only changes when `r` does.
    r_star_cache: Option<(DVector<f64>, DVector<f64>)>,
}

impl GovernorState {
    pub fn new(v0: DVector<f64>) -> Self {
        Self {
            v_prev: v0,
            warm_start: Vec::new(),
            cycle_index: 0,
            r_star_cache: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverSummary {
    pub iterations: usize,
    pub converged: bool,
    pub feasible: bool,
}

impl From<&QpResult> for SolverSummary {
    fn from(r: &QpResult) -> Self {
        Self {
            iterations: r.iterations,
            converged: r.converged,
            feasible: r.feasible,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub v_applied: DVector<f64>,
    pub candidate: DVector<f64>,
    pub accepted: bool,
    pub fallback_used: bool,
    /// `|v_applied - r|_Q^2`.
    pub v_value: f64,
    pub solver: SolverSummary,
}

/// Cross-section data for one state: unit normals (shared with the set) and
/// the state-dependent bounds.
#[derive(Debug, Clone)]
pub struct Section<'a> {
    pub normals: &'a DMatrix<f64>,
    pub bounds: DVector<f64>,
    pub empty: bool,
}

impl<'a> Section<'a> {
    pub fn at(set: &'a SafeSet, x: &DVector<f64>) -> Result<Self> {
        if x.len() != set.n() {
            return Err(Error::dim("section: state", set.n(), x.len()));
        }
        let (bounds, empty) = set.section_bounds(x);
        Ok(Self {
            normals: set.section_normals(),
            bounds,
            empty,
        })
    }

    pub fn from_cross_section(cs: &'a CrossSection) -> Self {
        Self {
            normals: cs.poly.h(),
            bounds: cs.poly.b().clone(),
            empty: cs.empty,
        }
    }

    pub fn contains(&self, v: &DVector<f64>, tol: f64) -> bool {
        if self.empty {
            return false;
        }
        let av = self.normals * v;
        av.iter().zip(self.bounds.iter()).all(|(a, b)| a - b <= tol)
    }

    /// Largest `k in [0, 1]` with `v0 + k d` in the section, `None` when no
    /// `k >= 0` is admissible.
    pub fn line_search(&self, v0: &DVector<f64>, d: &DVector<f64>) -> Option<f64> {
        if self.empty {
            return None;
        }
        let a0 = self.normals * v0;
        let ad = self.normals * d;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for i in 0..ad.len() {
            let mut slack = self.bounds[i] - a0[i];
            if slack > -LINE_TOL && slack < 0.0 {
                slack = 0.0;
            }
            let rate = ad[i];
            if rate > 0.0 {
                hi = hi.min(slack / rate);
            } else if rate < 0.0 {
                lo = lo.max(slack / rate);
            } else if slack < 0.0 {
                return None;
            }
        }
        (lo <= hi).then_some(hi)
    }
}

/// Candidate produced by an approximate (or exact) solver.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub candidate: DVector<f64>,
    /// The solver's own feasibility claim; the governor re-checks anyway.
    pub feasible: bool,
    pub summary: SolverSummary,
}

/// Produces a candidate command that should lie in `section` and approach
/// `target`. Implementations may be arbitrarily poor; the acceptance test is
/// what keeps the closed loop safe.
pub trait CandidateSolver: Send + Sync {
    fn propose(&mut self, section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Proposal;

    fn clone_box(&self) -> Box<dyn CandidateSolver>;
}

impl Clone for Box<dyn CandidateSolver> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Warm-started active-set QP on the projection or biobjective problem,
/// stopped at `cfg.max_iter`.
#[derive(Debug, Clone, Default)]
pub struct QpSolver {
    qp: ActiveSetQp,
}

impl QpSolver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&mut self, section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig, max_iter: usize) -> QpResult {
        let res = match cfg.objective {
            Objective::Projection => self.qp.solve_raw(&cfg.weight, target, section.normals, &section.bounds, &st.warm_start, max_iter),
            Objective::Biobjective => {
                let mid = (target + &st.v_prev) * 0.5;
                self.qp.solve_raw(&cfg.weight.scaled(2.0), &mid, section.normals, &section.bounds, &st.warm_start, max_iter)
            }
        };
        st.warm_start.clone_from(&res.active);
        res
    }
}

impl CandidateSolver for QpSolver {
    fn propose(&mut self, section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Proposal {
        let res = self.solve(section, target, st, cfg, cfg.max_iter);
        Proposal {
            feasible: res.feasible && !res.infeasible,
            summary: SolverSummary::from(&res),
            candidate: res.v,
        }
    }

    fn clone_box(&self) -> Box<dyn CandidateSolver> {
        Box::new(self.clone())
    }
}

/// One line search per call along `E(t) (target - v_prev)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoordinateDescent;

impl CandidateSolver for CoordinateDescent {
    fn propose(&mut self, section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Proposal {
        let (candidate, feasible) = coordinate_descent_step(section, target, st, cfg);
        Proposal {
            candidate,
            feasible,
            summary: SolverSummary {
                iterations: 1,
                converged: false,
                feasible,
            },
        }
    }

    fn clone_box(&self) -> Box<dyn CandidateSolver> {
        Box::new(*self)
    }
}

/// The `E(t)` mask for cycle position `k`: `e_{k mod m}` for all but the last
/// position of the period, all-ones for the last.
pub fn cycle_mask(k: usize, m: usize, n_period: usize) -> DVector<f64> {
    if k % n_period == n_period - 1 {
        DVector::from_element(m, 1.0)
    } else {
        let mut e = DVector::zeros(m);
        e[(k % n_period) % m] = 1.0;
        e
    }
}

fn coordinate_descent_step(section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> (DVector<f64>, bool) {
    let m = st.v_prev.len();
    let mask = cycle_mask(st.cycle_index, m, cfg.n_period);
    st.cycle_index = (st.cycle_index + 1) % cfg.n_period;
    let d = (target - &st.v_prev).component_mul(&mask);
    match section.line_search(&st.v_prev, &d) {
        Some(k) => (&st.v_prev + d * k, true),
        None => (st.v_prev.clone(), false),
    }
}

/// Coordinate-descent candidate on the cross-section at `x`; advances the
/// cycle.
pub fn coordinate_descent_solve(set: &SafeSet, x: &DVector<f64>, r_star: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Result<(DVector<f64>, bool)> {
    let section = Section::at(set, x)?;
    Ok(coordinate_descent_step(&section, r_star, st, cfg))
}

fn outcome(v: DVector<f64>, candidate: DVector<f64>, accepted: bool, r: &DVector<f64>, weight: &Weight, solver: SolverSummary) -> StepOutcome {
    StepOutcome {
        v_value: weight.norm_sq(&(&v - r)),
        v_applied: v,
        candidate,
        accepted,
        fallback_used: false,
        solver,
    }
}

/// Scalar reference governor: the furthest point of the segment from
/// `v_prev` to `r` inside the section.
pub fn srg_step(set: &SafeSet, x: &DVector<f64>, r: &DVector<f64>, st: &mut GovernorState, weight: &Weight) -> Result<StepOutcome> {
    let section = Section::at(set, x)?;
    Ok(srg_on(&section, r, st, weight))
}

fn srg_on(section: &Section<'_>, r: &DVector<f64>, st: &mut GovernorState, weight: &Weight) -> StepOutcome {
    let d = r - &st.v_prev;
    let (v, ok) = match section.line_search(&st.v_prev, &d) {
        Some(k) => (&st.v_prev + &d * k, true),
        None => (st.v_prev.clone(), false),
    };
    st.v_prev.clone_from(&v);
    let summary = SolverSummary {
        iterations: 1,
        converged: ok,
        feasible: ok,
    };
    outcome(v.clone(), v, ok, r, weight, summary)
}

/// Progress test of the modified CG. Returns the applied command and whether
/// the candidate was taken.
pub fn accept_or_hold(candidate: &DVector<f64>, feasible: bool, r: &DVector<f64>, v_prev: &DVector<f64>, weight: &Weight) -> (DVector<f64>, bool) {
    if feasible && progress_holds(candidate, r, v_prev, weight) {
        (candidate.clone(), true)
    } else {
        (v_prev.clone(), false)
    }
}

pub fn progress_holds(candidate: &DVector<f64>, r: &DVector<f64>, v_prev: &DVector<f64>, weight: &Weight) -> bool {
    let lhs = weight.norm_sq(&(candidate - r));
    let rhs = weight.norm_sq(&(v_prev - r)) - weight.norm_sq(&(candidate - v_prev));
    lhs <= rhs + ACCEPT_TOL
}

/// Exact projection of `r` onto the attainable steady commands.
pub fn project_to_rp(rp: &CrossSection, r: &DVector<f64>, weight: &Weight) -> Result<DVector<f64>> {
    if rp.empty {
        return Err(Error::EmptySet);
    }
    if r.len() != rp.poly.dim() {
        return Err(Error::dim("project_to_rp: reference", rp.poly.dim(), r.len()));
    }
    let res = ActiveSetQp::new().solve_raw(weight, r, rp.poly.h(), rp.poly.b(), &[], EXACT_CAP);
    if res.infeasible || !res.feasible {
        return Err(Error::EmptySet);
    }
    Ok(res.v)
}

/// Feasible starting command at `x0`: the exact projection of `r0` onto the
/// cross-section.
pub fn initial_command(set: &SafeSet, x0: &DVector<f64>, r0: &DVector<f64>, weight: &Weight) -> Result<DVector<f64>> {
    let section = Section::at(set, x0)?;
    if section.empty {
        return Err(Error::StartupInfeasible);
    }
    let res = ActiveSetQp::new().solve_raw(weight, r0, section.normals, &section.bounds, &[], EXACT_CAP);
    if res.infeasible || !res.converged || !section.contains(&res.v, SECTION_TOL) {
        return Err(Error::StartupInfeasible);
    }
    Ok(res.v)
}

/// A governor bound to its safe set: owns the mutable state and the solver.
#[derive(Clone)]
pub struct Governor {
    cfg: GovernorConfig,
    set: Arc<SafeSet>,
    sys: Arc<LinearSystem>,
    rp: Option<Arc<CrossSection>>,
    solver: Box<dyn CandidateSolver>,
    state: GovernorState,
}

impl std::fmt::Debug for Governor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Governor")
            .field("variant", &self.cfg.variant)
            .field("rows", &self.set.rows())
            .field("state", &self.state)
            .finish()
    }
}

impl Governor {
    /// Builds the governor with the solver named in `cfg` and `v(0)` from
    /// [`initial_command`].
    pub fn new(cfg: GovernorConfig, set: Arc<SafeSet>, sys: Arc<LinearSystem>, x0: &DVector<f64>, r0: &DVector<f64>) -> Result<Self> {
        let solver: Box<dyn CandidateSolver> = match cfg.solver {
            SolverKind::ActiveSet => Box::new(QpSolver::new()),
            SolverKind::CoordinateDescent => Box::new(CoordinateDescent),
        };
        Self::with_solver(cfg, set, sys, x0, r0, solver)
    }

    pub fn with_solver(
        cfg: GovernorConfig,
        set: Arc<SafeSet>,
        sys: Arc<LinearSystem>,
        x0: &DVector<f64>,
        r0: &DVector<f64>,
        solver: Box<dyn CandidateSolver>,
    ) -> Result<Self> {
        cfg.validate()?;
        if set.m() != cfg.m() || sys.m() != cfg.m() {
            return Err(Error::dim("governor: Q dimension", set.m(), cfg.m()));
        }
        if sys.n() != set.n() {
            return Err(Error::dim("governor: system states", set.n(), sys.n()));
        }
        if cfg.variant == Variant::CgExact && !set.is_invariant() {
            return Err(Error::InvalidConfig("the exact CG requires an invariant safe set".into()));
        }
        if r0.len() != cfg.m() {
            return Err(Error::dim("governor: reference", cfg.m(), r0.len()));
        }
        let rp = if cfg.variant == Variant::Algorithm1 {
            let rp = set.steady_state_set(&sys)?;
            if rp.empty {
                return Err(Error::EmptySet);
            }
            Some(Arc::new(rp))
        } else {
            None
        };
        let v0 = initial_command(&set, x0, r0, &cfg.weight)?;
        Ok(Self {
            cfg,
            set,
            sys,
            rp,
            solver,
            state: GovernorState::new(v0),
        })
    }

    pub fn config(&self) -> &GovernorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &GovernorState {
        &self.state
    }

    pub fn set(&self) -> &SafeSet {
        &self.set
    }

    pub fn steady_state_set(&self) -> Option<&CrossSection> {
        self.rp.as_deref()
    }

    pub fn step(&mut self, x: &DVector<f64>, r: &DVector<f64>) -> Result<StepOutcome> {
        if r.len() != self.cfg.m() {
            return Err(Error::dim("governor step: reference", self.cfg.m(), r.len()));
        }
        let section = Section::at(&self.set, x)?;
        let out = match self.cfg.variant {
            Variant::Srg => srg_on(&section, r, &mut self.state, &self.cfg.weight),
            Variant::CgExact => cg_exact_on(&section, r, &mut self.state, &self.cfg, &mut *self.solver),
            Variant::CgModified => cg_modified_on(&section, r, &mut self.state, &self.cfg, &mut *self.solver),
            Variant::Algorithm1 => {
                let rp = self.rp.as_deref().expect("steady set built for this variant");
                algorithm1_on(&section, rp, &self.sys, x, r, &mut self.state, &self.cfg, &mut *self.solver)?
            }
        };
        Ok(out)
    }
}

/// Conventional CG: exact projection, hold when the section is empty.
pub fn cg_step_exact(set: &SafeSet, x: &DVector<f64>, r: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Result<StepOutcome> {
    if !set.is_invariant() {
        return Err(Error::InvalidConfig("the exact CG requires an invariant safe set".into()));
    }
    let section = Section::at(set, x)?;
    Ok(cg_exact_on(&section, r, st, cfg, &mut QpSolver::new()))
}

fn cg_exact_on(section: &Section<'_>, r: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig, solver: &mut dyn CandidateSolver) -> StepOutcome {
    let p = solver.propose(section, r, st, cfg);
    let ok = !section.empty && p.feasible && section.contains(&p.candidate, SECTION_TOL);
    let v = if ok { p.candidate.clone() } else { st.v_prev.clone() };
    st.v_prev.clone_from(&v);
    outcome(v, p.candidate, ok, r, &cfg.weight, p.summary)
}

/// Modified CG: whatever the capped solver returns goes through the progress
/// test.
pub fn cg_step_modified(
    set: &SafeSet,
    x: &DVector<f64>,
    r: &DVector<f64>,
    st: &mut GovernorState,
    cfg: &GovernorConfig,
    solver: &mut dyn CandidateSolver,
) -> Result<StepOutcome> {
    let section = Section::at(set, x)?;
    Ok(cg_modified_on(&section, r, st, cfg, solver))
}

fn cg_modified_on(section: &Section<'_>, r: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig, solver: &mut dyn CandidateSolver) -> StepOutcome {
    let p = solver.propose(section, r, st, cfg);
    let feasible = section.contains(&p.candidate, SECTION_TOL);
    let (v, accepted) = accept_or_hold(&p.candidate, feasible, r, &st.v_prev, &cfg.weight);
    st.v_prev.clone_from(&v);
    outcome(v, p.candidate, accepted, r, &cfg.weight, p.summary)
}

/// Inexact-solver algorithm with proximity fallback.
#[allow(clippy::too_many_arguments)]
pub fn algorithm1_step(
    set: &SafeSet,
    rp: &CrossSection,
    sys: &LinearSystem,
    x: &DVector<f64>,
    r: &DVector<f64>,
    st: &mut GovernorState,
    cfg: &GovernorConfig,
    solver: &mut dyn CandidateSolver,
) -> Result<StepOutcome> {
    let section = Section::at(set, x)?;
    algorithm1_on(&section, rp, sys, x, r, st, cfg, solver)
}

#[allow(clippy::too_many_arguments)]
fn algorithm1_on(
    section: &Section<'_>,
    rp: &CrossSection,
    sys: &LinearSystem,
    x: &DVector<f64>,
    r: &DVector<f64>,
    st: &mut GovernorState,
    cfg: &GovernorConfig,
    solver: &mut dyn CandidateSolver,
) -> Result<StepOutcome> {
    let r_star = match &st.r_star_cache {
        Some((cached_r, r_star)) if cached_r == r => r_star.clone(),
        _ => {
            let r_star = project_to_rp(rp, r, &cfg.weight)?;
            st.r_star_cache = Some((r.clone(), r_star.clone()));
            r_star
        }
    };
    let p = solver.propose(section, &r_star, st, cfg);
    let feasible = section.contains(&p.candidate, SECTION_TOL);
    let gate_target = match cfg.acceptance_target {
        AcceptanceTarget::R => r,
        AcceptanceTarget::RStar => &r_star,
    };
    let (v_dd, accepted) = accept_or_hold(&p.candidate, feasible, gate_target, &st.v_prev, &cfg.weight);

    let mut fallback_used = false;
    let mut v = v_dd;
    let x_v = sys.equilibrium(&st.v_prev)?;
    let near_equilibrium = (x - x_v).norm() <= cfg.eps_prime;
    let stalled = cfg.weight.norm(&(&v - &st.v_prev)) < cfg.delta_prime;
    if near_equilibrium && stalled {
        let d = &r_star - &st.v_prev;
        let len = d.norm();
        if len > 0.0 {
            let v_f = &st.v_prev + d * (cfg.delta_dprime / len).min(1.0);
            if section.contains(&v_f, SECTION_TOL) {
                v = v_f;
                fallback_used = true;
            } else {
                debug!("fallback point infeasible at |x - x_v| = {:.3e}; holding", (x - sys.equilibrium(&st.v_prev)?).norm());
                v = st.v_prev.clone();
            }
        } else {
            v = st.v_prev.clone();
        }
    }
    st.v_prev.clone_from(&v);
    let mut out = outcome(v, p.candidate, accepted, r, &cfg.weight, p.summary);
    out.fallback_used = fallback_used;
    Ok(out)
}
