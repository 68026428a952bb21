//! Exit criteria, one line each. Runs without the libtest harness so the
//! PASS/FAIL lines always reach the console.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use command_governor::governor::{project_to_rp, srg_step, Governor, GovernorConfig, GovernorState, Variant};
use command_governor::moas::determination_excess;
use command_governor::qp::{ActiveSetQp, QpProblem, Weight};
use command_governor::scenario::{Scenario, SetCache};
use command_governor::sim::{compare_implementations, run_scenario};
use command_governor::{LinearSystem, Polytope, SafeSet};
use common::{dv, f16, kkt_oracle, random_segments, AdversarialSolver, PythagorasLog};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZON: usize = 2000;
const MARGIN_TOL: f64 = 1e-9;
const MOAS_ROWS: (usize, usize) = (600, 900);
const REDUCED_MAX_ROWS: usize = 160;
const MIN_STORAGE_RATIO: f64 = 5.0;
const CONTAINMENT_TOL: f64 = 1e-7;
const TIMING_REPEATS: usize = 19;
const MIN_TIMING_GAP: f64 = 0.20;
const MAX_IMPL2_REJECTION_RATE: f64 = 0.10;
const MIN_REJECTION_RATIO: usize = 3;
/// Rejection counts of the bundled F-16 run, pinned after the first
/// certified run.
const PINNED_REJECTIONS: [(&str, usize); 3] = [("impl1", 0), ("impl2", 19), ("impl3", 70)];
const LYAPUNOV_STEPS: usize = 1000;
const LYAPUNOV_TOL: f64 = 1e-12;
const CONVERGENCE_TRIALS: usize = 50;
const CONVERGENCE_STEPS: usize = 500;
/// Round-off allowance for "reached exactly".
const EXACT_TOL: f64 = 1e-12;
const MEMBERSHIP_SAMPLES: usize = 500;
const ORACLE_STEPS: usize = 2000;
const KKT_INSTANCES: usize = 200;
const KKT_TOL: f64 = 1e-6;
const SRG_SECTIONS: usize = 200;
const GRID: f64 = 1e-6;
const PYTHAGORAS_TOL: f64 = 1e-9;

type Outcome = (bool, String);

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let sets = f16();
    let sc = &sets.scenario;
    let mut cache = SetCache::with_sets(Some(sets.moas.set.clone()), Some(sets.reduction.set.clone()));
    let mut worst = f64::NEG_INFINITY;
    let mut detail = Vec::new();
    for name in ["impl1", "impl2", "impl3"] {
        let e = cache.entry(sc, name).unwrap();
        let (_, summary) = run_scenario(&sc.system, &sc.constraints, &e.set, &e.cfg, &sc.profile, &sc.x0, HORIZON).unwrap();
        worst = worst.max(summary.max_margin);
        detail.push(format!("{name} {:.3e}", summary.max_margin));
    }
    let secs = started.elapsed().as_secs_f64();
    (
        worst <= MARGIN_TOL,
        format!("max margin {} (<= {MARGIN_TOL:e}); {secs:.1} s", detail.join(", ")),
    )
}

fn criterion_2() -> Outcome {
    let sets = f16();
    let sc = &sets.scenario;
    let rows = sets.moas.set.rows();
    let recheck = determination_excess(&sets.moas.set, &sc.system, &sc.constraints, sets.moas.t_star).unwrap();
    let tol = sc.moas.tol;
    let ok = (MOAS_ROWS.0..=MOAS_ROWS.1).contains(&rows) && sets.moas.certificate_excess <= tol && recheck <= tol;
    (
        ok,
        format!(
            "{rows} rows in [{}, {}], t* = {}, certificate excess {:.3e} (recheck {:.3e}, tol {tol:e})",
            MOAS_ROWS.0, MOAS_ROWS.1, sets.moas.t_star, sets.moas.certificate_excess, recheck
        ),
    )
}

fn criterion_3() -> Outcome {
    let sets = f16();
    let red = &sets.reduction;
    let rows = red.set.rows();
    let ratio = red.storage_ratio();
    let cert = red.set.poly().is_subset(sets.moas.set.poly(), CONTAINMENT_TOL).unwrap();
    let ok = rows <= REDUCED_MAX_ROWS && ratio >= MIN_STORAGE_RATIO && cert.subset;
    (
        ok,
        format!(
            "{rows} rows (<= {REDUCED_MAX_ROWS}), storage ratio {ratio:.2} (>= {MIN_STORAGE_RATIO}), containment {} (worst excess {:.3e}, tol {CONTAINMENT_TOL:e})",
            if cert.subset { "certified" } else { "failed" },
            cert.worst_excess
        ),
    )
}

fn f16_comparison() -> command_governor::sim::ComparisonReport {
    let sets = f16();
    let sc = &sets.scenario;
    let mut cache = SetCache::with_sets(Some(sets.moas.set.clone()), Some(sets.reduction.set.clone()));
    let entries: Vec<_> = ["impl1", "impl2", "impl3"].iter().map(|n| cache.entry(sc, n).unwrap()).collect();
    compare_implementations(&sc.system, &sc.constraints, &entries, &sc.profile, &sc.x0, HORIZON, TIMING_REPEATS, false).unwrap()
}

fn criterion_4(report: &command_governor::sim::ComparisonReport) -> Outcome {
    let t: Vec<f64> = report.entries.iter().map(|e| e.mean_step_ms).collect();
    let gap12 = 1.0 - t[1] / t[0];
    let gap23 = 1.0 - t[2] / t[1];
    let ok = gap12 >= MIN_TIMING_GAP && gap23 >= MIN_TIMING_GAP;
    (
        ok,
        format!(
            "mean step ms impl1 {:.4}, impl2 {:.4}, impl3 {:.4}; gaps {:.1}% and {:.1}% (>= {:.0}% each, {TIMING_REPEATS} repeats)",
            t[0],
            t[1],
            t[2],
            100.0 * gap12,
            100.0 * gap23,
            100.0 * MIN_TIMING_GAP
        ),
    )
}

fn criterion_5(report: &command_governor::sim::ComparisonReport) -> Outcome {
    let count = |name: &str| report.entries.iter().find(|e| e.name == name).unwrap().rejections;
    let (r2, r3) = (count("impl2"), count("impl3"));
    let rate_ok = (r2 as f64) < MAX_IMPL2_REJECTION_RATE * HORIZON as f64;
    let ratio_ok = r3 > r2 && r3 >= MIN_REJECTION_RATIO * r2;
    let pinned_ok = PINNED_REJECTIONS.iter().all(|&(n, c)| count(n) == c);
    (
        rate_ok && ratio_ok && pinned_ok,
        format!(
            "rejections impl1 {}, impl2 {r2} (< {:.0}), impl3 {r3} (>= {MIN_REJECTION_RATIO}x impl2); pinned {:?} {}",
            count("impl1"),
            MAX_IMPL2_REJECTION_RATE * HORIZON as f64,
            PINNED_REJECTIONS,
            if pinned_ok { "match" } else { "differ" }
        ),
    )
}

#[derive(Default)]
struct LyapunovStats {
    accepted: usize,
    gate_failures: usize,
    monotone_checks: usize,
    monotone_failures: usize,
    unsafe_steps: usize,
    fallbacks: usize,
}

fn lyapunov_run(sys: &Arc<LinearSystem>, sc: &Scenario, set: Arc<SafeSet>, cfg: GovernorConfig, half: f64, seed: u64, stats: &mut LyapunovStats) -> PythagorasLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = random_segments(&mut rng, sys.m(), half, LYAPUNOV_STEPS);
    let solver = AdversarialSolver::new(seed ^ 0x5eed, PYTHAGORAS_TOL);
    let log = solver.log.clone();
    let mut x = sc.x0.clone();
    let w = cfg.weight.clone();
    let mut gov = Governor::with_solver(cfg, set, sys.clone(), &x, &refs[0], Box::new(solver)).unwrap();
    for (t, r) in refs.iter().enumerate() {
        let vp = gov.state().v_prev.clone();
        let out = gov.step(&x, r).unwrap();
        let v = &out.v_applied;
        let before = w.norm_sq(&(&vp - r));
        let after = w.norm_sq(&(v - r));
        if out.fallback_used {
            stats.fallbacks += 1;
        } else if out.accepted {
            stats.accepted += 1;
            if before < after + w.norm_sq(&(v - &vp)) - LYAPUNOV_TOL {
                stats.gate_failures += 1;
            }
        }
        if t > 0 && refs[t - 1] == *r {
            stats.monotone_checks += 1;
            if after > before + LYAPUNOV_TOL {
                stats.monotone_failures += 1;
            }
        }
        if sc.constraints.margin(&x, v).unwrap() > MARGIN_TOL {
            stats.unsafe_steps += 1;
        }
        x = sys.step(&x, v).unwrap();
    }
    let log = log.lock().unwrap().clone();
    log
}

fn criterion_6(pythagoras: &mut PythagorasLog) -> Outcome {
    let mut stats = LyapunovStats::default();
    let scalar = Scenario::bundled("scalar").unwrap();
    let f = f16();
    let f16_cache = || SetCache::with_sets(Some(f.moas.set.clone()), Some(f.reduction.set.clone()));
    let runs = [
        (&scalar, SetCache::default(), "modified", 2.0),
        (&f.scenario, f16_cache(), "impl2", 15.0),
        (&scalar, SetCache::default(), "alg1", 2.0),
        (&f.scenario, f16_cache(), "alg1", 15.0),
    ];
    for (k, (sc, mut cache, name, half)) in runs.into_iter().enumerate() {
        let e = cache.entry(sc, name).unwrap();
        let log = lyapunov_run(&sc.system, sc, e.set, e.cfg, half, 100 + k as u64, &mut stats);
        pythagoras.checked += log.checked;
        pythagoras.failures += log.failures;
        pythagoras.worst_gap = pythagoras.worst_gap.min(log.worst_gap);
    }
    let ok = stats.gate_failures == 0 && stats.monotone_failures == 0 && stats.unsafe_steps == 0 && stats.accepted > 0;
    (
        ok,
        format!(
            "{} steps: {} accepted ({} violate the decrease inequality), {} fallbacks, {}/{} constant-reference steps with V increasing, {} unsafe (tol {LYAPUNOV_TOL:e})",
            4 * LYAPUNOV_STEPS,
            stats.accepted,
            stats.gate_failures,
            stats.fallbacks,
            stats.monotone_failures,
            stats.monotone_checks,
            stats.unsafe_steps
        ),
    )
}

fn criterion_7() -> Outcome {
    let sc = Scenario::bundled("scalar").unwrap();
    let mut cache = SetCache::default();
    let e = cache.entry(&sc, "alg1").unwrap();
    assert!(!e.set.is_invariant());
    assert_eq!(e.cfg.variant, Variant::Algorithm1);
    let mut cfg = e.cfg.clone();
    cfg.max_iter = 1;
    let rp = e.set.steady_state_set(&sc.system).unwrap();
    let w = Weight::identity(1);
    let lo = project_to_rp(&rp, &dv(&[-1e3]), &w).unwrap()[0];
    let hi = project_to_rp(&rp, &dv(&[1e3]), &w).unwrap()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    let mut worst_step = 0;
    for trial in 0..CONVERGENCE_TRIALS {
        let inside = trial % 2 == 0;
        let r = if inside {
            rng.random_range(lo..hi)
        } else if rng.random_bool(0.5) {
            hi + rng.random_range(0.05..2.0)
        } else {
            lo - rng.random_range(0.05..2.0)
        };
        let r = dv(&[r]);
        let target = if inside { r.clone() } else { project_to_rp(&rp, &r, &w).unwrap() };
        // Start from the command for the opposite end of the range.
        let start = dv(&[if r[0] > 0.0 { lo } else { hi }]);
        let mut x = sc.system.equilibrium(&start).unwrap();
        let mut gov = Governor::new(cfg.clone(), e.set.clone(), sc.system.clone(), &x, &start).unwrap();
        let mut reached = None;
        for t in 0..=CONVERGENCE_STEPS {
            let out = gov.step(&x, &r).unwrap();
            let at = (&out.v_applied - &target).norm() <= EXACT_TOL;
            match (reached, at) {
                (None, true) => reached = Some(t),
                (Some(_), false) => reached = None,
                _ => {}
            }
            x = sc.system.step(&x, &out.v_applied).unwrap();
        }
        match reached {
            Some(t) => worst_step = worst_step.max(t),
            None => failures.push(format!("r = {:.4}", r[0])),
        }
    }
    (
        failures.is_empty(),
        format!(
            "{}/{CONVERGENCE_TRIALS} references reached (R_P = [{lo:.4}, {hi:.4}]), slowest at step {worst_step} (<= {CONVERGENCE_STEPS}){}",
            CONVERGENCE_TRIALS - failures.len(),
            if failures.is_empty() { String::new() } else { format!("; missed {}", failures.join(", ")) }
        ),
    )
}

/// Does the constant command `v` keep the 1-D system admissible from `x`
/// for `ORACLE_STEPS` steps?
fn simulated_admissible(sc: &Scenario, x: f64, v: f64) -> bool {
    let mut x = dv(&[x]);
    let v = dv(&[v]);
    for _ in 0..=ORACLE_STEPS {
        if sc.constraints.margin(&x, &v).unwrap() > 0.0 {
            return false;
        }
        x = sc.system.step(&x, &v).unwrap();
    }
    true
}

fn membership_oracle() -> (bool, String) {
    let sc = Scenario::bundled("scalar").unwrap();
    let set = sc.build_moas().unwrap().set;
    let eps = sc.moas.epsilon;
    let cm = &sc.constraints;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut inside, mut band, mut bad) = (0, 0, 0);
    for _ in 0..MEMBERSHIP_SAMPLES {
        let (x, v) = (rng.random_range(-1.3..1.3), rng.random_range(-1.3..1.3));
        let member = set.contains(&dv(&[x]), &dv(&[v]), 0.0);
        let oracle = simulated_admissible(&sc, x, v);
        inside += member as usize;
        if member == oracle {
            continue;
        }
        // Only the steady-state tightening may separate the two.
        let xv = sc.system.equilibrium(&dv(&[v])).unwrap();
        let y = cm.gamma_mat() * (cm.cc() * &xv + cm.dc() * dv(&[v]));
        let tight = (0..y.len()).any(|i| y[i] > (1.0 - eps) * cm.gamma()[i]);
        if oracle && !member && tight {
            band += 1;
        } else {
            bad += 1;
        }
    }
    (
        bad == 0 && inside > 0 && inside < MEMBERSHIP_SAMPLES,
        format!("membership {inside}/{MEMBERSHIP_SAMPLES} inside, {band} in the tightening band, {bad} other disagreements"),
    )
}

fn kkt_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..KKT_INSTANCES {
        let rows = rng.random_range(3..=12usize);
        let l = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let q = &l * l.transpose() + DMatrix::identity(2, 2) * 0.1;
        let t = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
        let a = DMatrix::from_fn(rows, 2, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let b = &a * &z0 + DVector::from_fn(rows, |_, _| rng.random_range(0.0..1.0));
        let expected = kkt_oracle(&q, &t, &a, &b).expect("feasible by construction");
        let p = QpProblem::new(q, t, a, b).unwrap();
        let res = ActiveSetQp::new().solve(&p, &[], 200).unwrap();
        let err = (&res.v - &expected).amax();
        worst = worst.max(err);
        if !res.converged || err > KKT_TOL {
            bad += 1;
        }
    }
    (
        bad == 0,
        format!("QP vs KKT enumeration on {KKT_INSTANCES} instances: worst error {worst:.2e} (<= {KKT_TOL:e})"),
    )
}

fn srg_grid() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = Weight::identity(2);
    let cells = (1.0 / GRID).round() as usize;
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..SRG_SECTIONS {
        let rows = rng.random_range(4..=10usize);
        let h = DMatrix::from_fn(rows, 3, |_, _| rng.random_range(-1.0..1.0));
        let z0 = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let b = &h * &z0 + DVector::from_fn(rows, |_, _| rng.random_range(0.05..1.0));
        let set = SafeSet::new(Polytope::new(h.clone(), b.clone()).unwrap(), 1, 2, true).unwrap();
        let x = dv(&[z0[0]]);
        let v0 = dv(&[z0[1], z0[2]]);
        let r = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
        let mut st = GovernorState::new(v0.clone());
        let out = srg_step(&set, &x, &r, &mut st, &w).unwrap();
        let d = &r - &v0;
        let kappa = (&out.v_applied - &v0).dot(&d) / d.norm_squared();
        // Largest grid point whose command satisfies every raw row.
        let admissible = |k: f64| {
            let z = DVector::from_column_slice(&[z0[0], v0[0] + k * d[0], v0[1] + k * d[1]]);
            (&h * z - &b).iter().all(|&s| s <= 0.0)
        };
        let grid = (0..=cells).take_while(|&j| admissible(j as f64 * GRID)).last().unwrap_or(0) as f64 * GRID;
        let err = kappa - grid;
        worst = worst.max(err.abs());
        if !(-1e-12..=GRID + 1e-12).contains(&err) {
            bad += 1;
        }
    }
    (
        bad == 0,
        format!("SRG step vs {GRID:e} grid on {SRG_SECTIONS} sections: worst offset {worst:.2e} (<= one cell)"),
    )
}

fn criterion_8() -> Outcome {
    let parts = [membership_oracle(), kkt_equivalence(), srg_grid()];
    let ok = parts.iter().all(|p| p.0);
    let detail = parts.iter().zip(["a", "b", "c"]).map(|((_, d), tag)| format!("({tag}) {d}")).collect::<Vec<_>>();
    (ok, detail.join("; "))
}

fn criterion_9(log: &PythagorasLog) -> Outcome {
    (
        log.checked > 0 && log.failures == 0,
        format!(
            "{} converged solves from a feasible previous command, {} violations, worst gap {:.2e} (tol {PYTHAGORAS_TOL:e})",
            log.checked, log.failures, log.worst_gap
        ),
    )
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {label}: {detail} [{:.1} s]",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    ok
}

fn main() {
    let mut pythagoras = PythagorasLog::default();
    let mut report = None;
    let results = [
        run("1 safety on F-16", criterion_1),
        run("2 admissible set size and certificate", criterion_2),
        run("3 reduction", criterion_3),
        run("4 timing order", || {
            let r = f16_comparison();
            let o = criterion_4(&r);
            report = Some(r);
            o
        }),
        run("5 rejection pattern", || match &report {
            Some(r) => criterion_5(r),
            None => criterion_5(&f16_comparison()),
        }),
        run("6 Lyapunov decrease", || criterion_6(&mut pythagoras)),
        run("7 finite-time convergence", criterion_7),
        run("8 oracle equivalence", criterion_8),
        run("9 projection identity", || criterion_9(&pythagoras)),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
