//! Closed-loop harness: plant, safe set and governor stepped together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::{project_to_rp, CandidateSolver, Governor, GovernorConfig};
use crate::model::{ConstraintMap, LinearSystem};
use crate::polytope::SafeSet;

/// Tolerance of the per-segment convergence test `|v - r*|_Q <= tol`.
pub const CONVERGENCE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub t_start: usize,
    pub r: Vec<f64>,
}

/// Piecewise-constant reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct ReferenceProfile {
    segments: Vec<Segment>,
}

impl TryFrom<Vec<Segment>> for ReferenceProfile {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        Self::new(segments)
    }
}

impl From<ReferenceProfile> for Vec<Segment> {
    fn from(p: ReferenceProfile) -> Self {
        p.segments
    }
}

impl ReferenceProfile {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let Some(first) = segments.first() else {
            return Err(Error::InvalidConfig("profile needs at least one segment".into()));
        };
        if first.t_start != 0 {
            return Err(Error::InvalidConfig("the first profile segment must start at 0".into()));
        }
        let m = first.r.len();
        for w in segments.windows(2) {
            if w[1].t_start <= w[0].t_start {
                return Err(Error::InvalidConfig(format!(
                    "profile start times must increase strictly ({} after {})",
                    w[1].t_start, w[0].t_start
                )));
            }
        }
        if let Some(s) = segments.iter().find(|s| s.r.len() != m) {
            return Err(Error::dim("profile: reference", m, s.r.len()));
        }
        if segments.iter().flat_map(|s| &s.r).any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("profile references must be finite".into()));
        }
        Ok(Self { segments })
    }

    pub fn constant(r: Vec<f64>) -> Self {
        Self {
            segments: vec![Segment { t_start: 0, r }],
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn m(&self) -> usize {
        self.segments[0].r.len()
    }

    pub fn segment_index(&self, t: usize) -> usize {
        self.segments.partition_point(|s| s.t_start <= t) - 1
    }

    pub fn at(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.segments[self.segment_index(t)].r)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub v: Vec<f64>,
    pub candidate: Vec<f64>,
    pub accepted: bool,
    pub fallback: bool,
    pub margin: f64,
    pub v_value: f64,
    pub iterations: usize,
    pub step_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimTrace {
    pub n: usize,
    pub m: usize,
    pub rows: Vec<TraceRow>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True when state and command columns agree bit for bit.
    pub fn same_trajectory(&self, other: &SimTrace) -> bool {
        let bits = |xs: &[f64]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| bits(&a.x) == bits(&b.x) && bits(&a.v) == bits(&b.v) && a.accepted == b.accepted)
    }

    pub fn rejection_steps(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| !r.accepted).map(|r| r.t).collect()
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        for (name, k) in [("x", self.n), ("r", self.m), ("v", self.m), ("candidate", self.m)] {
            cols.extend((1..=k).map(|i| format!("{name}_{i}")));
        }
        cols.extend(["accepted", "fallback", "margin", "V", "iters", "step_ms"].map(String::from));
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{}", row.t);
            for x in row.x.iter().chain(&row.r).chain(&row.v).chain(&row.candidate) {
                let _ = write!(out, ",{x}");
            }
            let _ = writeln!(
                out,
                ",{},{},{},{},{},{}",
                row.accepted as u8, row.fallback as u8, row.margin, row.v_value, row.iterations, row.step_ms
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_csv().as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTimes {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl StepTimes {
    fn from_samples(mut ms: Vec<f64>) -> Self {
        if ms.is_empty() {
            return Self {
                mean_ms: 0.0,
                p50_ms: 0.0,
                p95_ms: 0.0,
                max_ms: 0.0,
            };
        }
        ms.sort_by(f64::total_cmp);
        let pct = |p: f64| ms[((ms.len() - 1) as f64 * p).round() as usize];
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
            max_ms: ms[ms.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub steps: usize,
    pub max_margin: f64,
    pub total_rejections: usize,
    pub fallbacks: usize,
    /// Per profile segment, the first step with `|v - r*|_Q <= 1e-9`.
    pub convergence_steps: Vec<Option<usize>>,
    pub step_times: StepTimes,
    /// Solver iterations per step -> number of steps.
    pub iteration_histogram: BTreeMap<usize, usize>,
}

impl SimSummary {
    /// Everything except timings, which is what repeat runs must share.
    pub fn deterministic_eq(&self, other: &SimSummary) -> bool {
        self.max_margin.to_bits() == other.max_margin.to_bits()
            && self.total_rejections == other.total_rejections
            && self.fallbacks == other.fallbacks
            && self.convergence_steps == other.convergence_steps
            && self.iteration_histogram == other.iteration_histogram
    }
}

/// Runs a governor built from `cfg` (and its default solver).
#[allow(clippy::too_many_arguments)]
pub fn run_scenario(
    sys: &Arc<LinearSystem>,
    cm: &ConstraintMap,
    set: &Arc<SafeSet>,
    cfg: &GovernorConfig,
    profile: &ReferenceProfile,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<(SimTrace, SimSummary)> {
    check_inputs(sys, profile, x0, horizon)?;
    let gov = Governor::new(cfg.clone(), set.clone(), sys.clone(), x0, &profile.at(0))?;
    run_governor(gov, sys, cm, profile, x0, horizon)
}

/// Same as [`run_scenario`] with a caller-supplied candidate solver.
#[allow(clippy::too_many_arguments)]
pub fn run_scenario_with_solver(
    sys: &Arc<LinearSystem>,
    cm: &ConstraintMap,
    set: &Arc<SafeSet>,
    cfg: &GovernorConfig,
    solver: Box<dyn CandidateSolver>,
    profile: &ReferenceProfile,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<(SimTrace, SimSummary)> {
    check_inputs(sys, profile, x0, horizon)?;
    let gov = Governor::with_solver(cfg.clone(), set.clone(), sys.clone(), x0, &profile.at(0), solver)?;
    run_governor(gov, sys, cm, profile, x0, horizon)
}

fn check_inputs(sys: &LinearSystem, profile: &ReferenceProfile, x0: &DVector<f64>, horizon: usize) -> Result<()> {
    if horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least 1".into()));
    }
    if x0.len() != sys.n() {
        return Err(Error::dim("simulation: x0", sys.n(), x0.len()));
    }
    if profile.m() != sys.m() {
        return Err(Error::dim("simulation: reference", sys.m(), profile.m()));
    }
    Ok(())
}

pub fn run_governor(
    mut gov: Governor,
    sys: &LinearSystem,
    cm: &ConstraintMap,
    profile: &ReferenceProfile,
    x0: &DVector<f64>,
    horizon: usize,
) -> Result<(SimTrace, SimSummary)> {
    check_inputs(sys, profile, x0, horizon)?;
    cm.compatible_with(sys)?;
    let weight = gov.config().weight.clone();
    let rp = match gov.steady_state_set() {
        Some(rp) => rp.clone(),
        None => gov.set().steady_state_set(sys)?,
    };
    let r_stars = profile
        .segments()
        .iter()
        .map(|s| project_to_rp(&rp, &DVector::from_column_slice(&s.r), &weight).ok())
        .collect::<Vec<_>>();

    let mut trace = SimTrace {
        n: sys.n(),
        m: sys.m(),
        rows: Vec::with_capacity(horizon),
    };
    let mut convergence = vec![None; profile.segments().len()];
    let mut histogram = BTreeMap::new();
    let mut x = x0.clone();
    for t in 0..horizon {
        let r = profile.at(t);
        let started = Instant::now();
        let out = gov.step(&x, &r)?;
        let step_ms = started.elapsed().as_nanos() as f64 * 1e-6;

        let margin = cm.margin(&x, &out.v_applied)?;
        let seg = profile.segment_index(t);
        if convergence[seg].is_none() {
            if let Some(rs) = &r_stars[seg] {
                if weight.norm(&(&out.v_applied - rs)) <= CONVERGENCE_TOL {
                    convergence[seg] = Some(t);
                }
            }
        }
        *histogram.entry(out.solver.iterations).or_insert(0) += 1;
        trace.rows.push(TraceRow {
            t,
            x: x.as_slice().to_vec(),
            r: r.as_slice().to_vec(),
            v: out.v_applied.as_slice().to_vec(),
            candidate: out.candidate.as_slice().to_vec(),
            accepted: out.accepted,
            fallback: out.fallback_used,
            margin,
            v_value: out.v_value,
            iterations: out.solver.iterations,
            step_ms,
        });
        x = sys.step(&x, &out.v_applied)?;
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(Error::NonFinite(t + 1));
        }
    }
    let summary = summarize(&trace, convergence, histogram);
    Ok((trace, summary))
}

fn summarize(trace: &SimTrace, convergence_steps: Vec<Option<usize>>, iteration_histogram: BTreeMap<usize, usize>) -> SimSummary {
    SimSummary {
        steps: trace.len(),
        max_margin: trace.rows.iter().map(|r| r.margin).fold(f64::NEG_INFINITY, f64::max),
        total_rejections: trace.rows.iter().filter(|r| !r.accepted).count(),
        fallbacks: trace.rows.iter().filter(|r| r.fallback).count(),
        convergence_steps,
        step_times: StepTimes::from_samples(trace.rows.iter().map(|r| r.step_ms).collect()),
        iteration_histogram,
    }
}

/// One governor configuration in a comparison.
#[derive(Debug, Clone)]
pub struct ConfigEntry {
    pub name: String,
    pub cfg: GovernorConfig,
    pub set: Arc<SafeSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub rows: usize,
    pub repeats: usize,
    /// Mean step time over all steps of all repeats.
    pub mean_step_ms: f64,
    /// Mean step time of each repeat.
    pub repeat_mean_ms: Vec<f64>,
    pub max_margin: f64,
    pub rejections: usize,
    pub rejection_steps: Vec<usize>,
    pub fallbacks: usize,
    pub convergence_steps: Vec<Option<usize>>,
    pub iteration_histogram: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub horizon: usize,
    pub repeats: usize,
    pub entries: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>6} {:>12} {:>12} {:>10} {:>10}  convergence\n",
            "governor", "rows", "mean_ms", "max_margin", "rejected", "fallback"
        );
        for e in &self.entries {
            let conv: Vec<String> = e
                .convergence_steps
                .iter()
                .map(|c| c.map_or("-".into(), |t| t.to_string()))
                .collect();
            let _ = writeln!(
                out,
                "{:<16} {:>6} {:>12.4} {:>12.3e} {:>10} {:>10}  {}",
                e.name,
                e.rows,
                e.mean_step_ms,
                e.max_margin,
                e.rejections,
                e.fallbacks,
                conv.join(" ")
            );
        }
        out
    }
}

/// Runs every entry `repeats` times. Repeats of one entry run back to back;
/// with `parallel` the entries themselves run concurrently, which skews
/// timings through contention.
#[allow(clippy::too_many_arguments)]
pub fn compare_implementations(
    sys: &Arc<LinearSystem>,
    cm: &ConstraintMap,
    entries: &[ConfigEntry],
    profile: &ReferenceProfile,
    x0: &DVector<f64>,
    horizon: usize,
    repeats: usize,
    parallel: bool,
) -> Result<ComparisonReport> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    let run_entry = |e: &ConfigEntry| -> Result<ComparisonRow> {
        let (first, first_summary) = run_scenario(sys, cm, &e.set, &e.cfg, profile, x0, horizon)?;
        let mut repeat_mean_ms = vec![first_summary.step_times.mean_ms];
        for _ in 1..repeats {
            let (trace, summary) = run_scenario(sys, cm, &e.set, &e.cfg, profile, x0, horizon)?;
            if !trace.same_trajectory(&first) || !summary.deterministic_eq(&first_summary) {
                return Err(Error::Numerical(format!("governor {} produced different traces across repeats", e.name)));
            }
            repeat_mean_ms.push(summary.step_times.mean_ms);
        }
        Ok(ComparisonRow {
            name: e.name.clone(),
            rows: e.set.rows(),
            repeats,
            mean_step_ms: repeat_mean_ms.iter().sum::<f64>() / repeats as f64,
            repeat_mean_ms,
            max_margin: first_summary.max_margin,
            rejections: first_summary.total_rejections,
            rejection_steps: first.rejection_steps(),
            fallbacks: first_summary.fallbacks,
            convergence_steps: first_summary.convergence_steps,
            iteration_histogram: first_summary.iteration_histogram,
        })
    };
    let entries = if parallel {
        entries.par_iter().map(run_entry).collect::<Result<Vec<_>>>()?
    } else {
        entries.iter().map(run_entry).collect::<Result<Vec<_>>>()?
    };
    Ok(ComparisonReport {
        horizon,
        repeats,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::governor::Variant;
    use crate::moas::{build_moas, MoasConfig};
    use nalgebra::DMatrix;

    fn scalar() -> (Arc<LinearSystem>, ConstraintMap, Arc<SafeSet>) {
        let sys = LinearSystem::from_rows(1, 1, &[0.5], &[0.5]).unwrap();
        let cm = ConstraintMap::from_intervals(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            &[(-1.0, 1.0), (-0.6, 0.6)],
        )
        .unwrap();
        let moas = build_moas(&sys, &cm, &MoasConfig::default()).unwrap();
        (Arc::new(sys), cm, Arc::new(moas.set))
    }

    #[test]
    fn profile_validation() {
        assert!(ReferenceProfile::new(vec![]).is_err());
        let seg = |t, r: f64| Segment { t_start: t, r: vec![r] };
        assert!(ReferenceProfile::new(vec![seg(1, 0.0)]).is_err());
        assert!(ReferenceProfile::new(vec![seg(0, 0.0), seg(0, 1.0)]).is_err());
        let p = ReferenceProfile::new(vec![seg(0, 0.0), seg(5, 1.0)]).unwrap();
        assert_eq!(p.at(4)[0], 0.0);
        assert_eq!(p.at(5)[0], 1.0);
        assert_eq!(p.at(500)[0], 1.0);
    }

    #[test]
    fn origin_stays_at_rest() {
        let (sys, cm, set) = scalar();
        let cfg = GovernorConfig::new(Variant::CgExact, 1);
        let (trace, summary) =
            run_scenario(&sys, &cm, &set, &cfg, &ReferenceProfile::constant(vec![0.0]), &DVector::zeros(1), 20).unwrap();
        assert_eq!(trace.len(), 20);
        assert!(trace.rows.iter().all(|r| r.v[0] == 0.0 && r.x[0] == 0.0));
        let min_gamma = cm.gamma().min();
        assert_eq!(summary.max_margin, -min_gamma);
        assert_eq!(summary.convergence_steps, vec![Some(0)]);
    }

    #[test]
    fn algorithm1_converges_on_scalar_plant() {
        let (sys, cm, set) = scalar();
        let mut cfg = GovernorConfig::new(Variant::Algorithm1, 1);
        cfg.max_iter = 1;
        let (trace, summary) =
            run_scenario(&sys, &cm, &set, &cfg, &ReferenceProfile::constant(vec![0.5]), &DVector::zeros(1), 200).unwrap();
        assert!(summary.max_margin <= 1e-9);
        assert!(summary.convergence_steps[0].is_some());
        for w in trace.rows.windows(2) {
            assert!(w[1].v_value <= w[0].v_value + 1e-12);
        }
    }

    #[test]
    fn csv_header_and_shape() {
        let (sys, cm, set) = scalar();
        let cfg = GovernorConfig::new(Variant::Srg, 1);
        let (trace, _) = run_scenario(&sys, &cm, &set, &cfg, &ReferenceProfile::constant(vec![0.3]), &DVector::zeros(1), 3).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,x_1,r_1,v_1,candidate_1,accepted,fallback,margin,V,iters,step_ms"
        );
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let (sys, cm, set) = scalar();
        let cfg = GovernorConfig::new(Variant::Srg, 1);
        let err = run_scenario(&sys, &cm, &set, &cfg, &ReferenceProfile::constant(vec![0.0]), &DVector::zeros(1), 0).unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn repeats_share_trajectories() {
        let (sys, cm, set) = scalar();
        let entry = ConfigEntry {
            name: "cg".into(),
            cfg: GovernorConfig::new(Variant::CgModified, 1),
            set,
        };
        let report = compare_implementations(
            &sys,
            &cm,
            &[entry.clone(), entry],
            &ReferenceProfile::constant(vec![0.9]),
            &DVector::zeros(1),
            50,
            2,
            false,
        )
        .unwrap();
        assert_eq!(report.entries[0].repeat_mean_ms.len(), 2);
        assert_eq!(report.entries[0].convergence_steps, report.entries[1].convergence_steps);
    }
}
