#![allow(dead_code)]

use std::sync::{Arc, Mutex, OnceLock};

use command_governor::governor::{CandidateSolver, GovernorConfig, GovernorState, Objective, Proposal, QpSolver, Section, SolverSummary};
use command_governor::moas::Moas;
use command_governor::polytope::reduce::Reduction;
use command_governor::scenario::Scenario;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub struct F16Sets {
    pub scenario: Scenario,
    pub moas: Moas,
    pub reduction: Reduction,
}

/// The bundled F-16 sets, built once per test binary.
pub fn f16() -> &'static F16Sets {
    static SETS: OnceLock<F16Sets> = OnceLock::new();
    SETS.get_or_init(|| {
        let scenario = Scenario::bundled("f16").unwrap();
        let moas = scenario.build_moas().unwrap();
        let reduction = scenario.reduce(&moas.set).unwrap();
        F16Sets {
            scenario,
            moas,
            reduction,
        }
    })
}

/// Outcome of every exact-optimality check made by [`AdversarialSolver`].
#[derive(Debug, Default, Clone)]
pub struct PythagorasLog {
    pub checked: usize,
    pub failures: usize,
    pub worst_gap: f64,
}

/// Active-set solver with a random iteration cap in `0..=3`; one call in
/// five returns a random point near `v_prev` that it claims is feasible.
/// Converged solves starting from a feasible `v_prev` are checked against
/// the projection inequality `|vp - t|^2 >= |v - t|^2 + |vp - v|^2`.
#[derive(Clone)]
pub struct AdversarialSolver {
    inner: QpSolver,
    rng: ChaCha8Rng,
    pub log: Arc<Mutex<PythagorasLog>>,
    pub tol: f64,
}

impl AdversarialSolver {
    pub fn new(seed: u64, tol: f64) -> Self {
        Self {
            inner: QpSolver::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: Arc::new(Mutex::new(PythagorasLog::default())),
            tol,
        }
    }
}

impl CandidateSolver for AdversarialSolver {
    fn propose(&mut self, section: &Section<'_>, target: &DVector<f64>, st: &mut GovernorState, cfg: &GovernorConfig) -> Proposal {
        if self.rng.random_bool(0.2) {
            let scale = 1.0 + target.norm();
            let candidate = st.v_prev.map(|v| v + scale * self.rng.random_range(-0.2..0.2));
            return Proposal {
                candidate,
                feasible: true,
                summary: SolverSummary {
                    iterations: 0,
                    converged: false,
                    feasible: true,
                },
            };
        }
        let cap = self.rng.random_range(0..=3usize);
        let vp = st.v_prev.clone();
        let vp_feasible = section.contains(&vp, 0.0);
        let res = self.inner.solve(section, target, st, cfg, cap);
        if res.converged && vp_feasible {
            let t = match cfg.objective {
                Objective::Projection => target.clone(),
                Objective::Biobjective => (target + &vp) * 0.5,
            };
            let w = &cfg.weight;
            let gap = w.norm_sq(&(&vp - &t)) - w.norm_sq(&(&res.v - &t)) - w.norm_sq(&(&vp - &res.v));
            let mut log = self.log.lock().unwrap();
            log.checked += 1;
            if gap < -self.tol {
                log.failures += 1;
            }
            log.worst_gap = log.worst_gap.min(gap);
        }
        Proposal {
            feasible: res.feasible,
            summary: SolverSummary::from(&res),
            candidate: res.v,
        }
    }

    fn clone_box(&self) -> Box<dyn CandidateSolver> {
        Box::new(self.clone())
    }
}

/// Piecewise-constant references: segments of 25 to 100 steps with every
/// component drawn from `[-half, half]`.
pub fn random_segments(rng: &mut impl Rng, m: usize, half: f64, steps: usize) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        let len = rng.random_range(25..=100usize);
        let r = DVector::from_fn(m, |_, _| rng.random_range(-half..half));
        out.extend(std::iter::repeat_n(r, len));
    }
    out.truncate(steps);
    out
}

/// Minimizer of `|v - t|_Q^2` over `A v <= b` by enumerating active sets of
/// size at most two and keeping the best KKT point.
pub fn kkt_oracle(q: &DMatrix<f64>, t: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let k = a.nrows();
    let q_inv = q.clone().try_inverse()?;
    let mut subsets: Vec<Vec<usize>> = vec![vec![]];
    for i in 0..k {
        subsets.push(vec![i]);
        for j in i + 1..k {
            subsets.push(vec![i, j]);
        }
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for s in subsets {
        let a_s = a.select_rows(s.iter());
        let b_s = b.select_rows(s.iter());
        let (v, lambda) = if s.is_empty() {
            (t.clone(), DVector::zeros(0))
        } else {
            let m = &a_s * &q_inv * a_s.transpose();
            if m.determinant().abs() < 1e-12 {
                continue;
            }
            let lambda = m.try_inverse()? * (&a_s * t - &b_s);
            (t - &q_inv * a_s.transpose() * &lambda, lambda)
        };
        let dual = lambda.iter().all(|&l| l >= -1e-10);
        let primal = (a * &v - b).iter().all(|&r| r <= 1e-9);
        if dual && primal {
            let d = &v - t;
            let obj = (d.transpose() * q * &d)[0];
            if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                best = Some((obj, v));
            }
        }
    }
    best.map(|(_, v)| v)
}
