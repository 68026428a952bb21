//! JSON scenario files.
//!
//! ```json
//! {
//!   "name": "demo",
//!   "seed": 0,
//!   "system": { "A": [[0.5]], "B": [[0.5]] },
//!   "constraints": { "Cc": [[1.0]], "Dc": [[0.0]], "bounds": [[-1.0, 1.0]] },
//!   "moas": { "epsilon": 0.001, "t_max": 500 },
//!   "reduction": { "slack_threshold": 0.001, "factor": "auto" },
//!   "governors": { "cg": { "variant": "cg_modified", "max_iter": 3 } },
//!   "profile": [ { "t_start": 0, "r": [0.5] } ],
//!   "sim": { "x0": [0.0], "horizon": 200, "repeats": 1 }
//! }
//! ```
//!
//! Matrices are lists of rows. Constraints take either interval `bounds`
//! (one `[lo, hi]` per output) or an explicit `Gamma` / `gamma` pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::governor::{AcceptanceTarget, GovernorConfig, Objective, SolverKind, Variant};
use crate::model::{ConstraintMap, LinearSystem};
use crate::moas::{build_moas, verify_invariance, Moas, MoasConfig};
use crate::polytope::reduce::{reduce, Reduction, ReductionConfig};
use crate::polytope::{io, SafeSet};
use crate::qp::Weight;
use crate::sim::{ConfigEntry, ReferenceProfile};

pub const F16_JSON: &str = include_str!("../scenarios/f16.json");
pub const SCALAR_JSON: &str = include_str!("../scenarios/scalar.json");

/// Samples drawn when `eps_prime` is estimated from the set.
const EPS_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintBlock {
    #[serde(rename = "Cc")]
    pub cc: Vec<Vec<f64>>,
    #[serde(rename = "Dc")]
    pub dc: Vec<Vec<f64>>,
    #[serde(default)]
    pub bounds: Option<Vec<(f64, f64)>>,
    #[serde(rename = "Gamma", default)]
    pub gamma_mat: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub gamma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsPrime {
    Fixed(f64),
    Auto(AutoTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetChoice {
    #[default]
    Moas,
    Reduced,
}

fn default_max_iter() -> usize {
    200
}

fn default_eps_prime() -> EpsPrime {
    EpsPrime::Auto(AutoTag::Auto)
}

fn default_delta_dprime() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GovernorSpec {
    pub variant: Variant,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_solver")]
    pub solver: SolverKind,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub set: SetChoice,
    #[serde(rename = "Q", default)]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_eps_prime")]
    pub eps_prime: EpsPrime,
    /// Defaults to `delta_dprime`.
    #[serde(default)]
    pub delta_prime: Option<f64>,
    #[serde(default = "default_delta_dprime")]
    pub delta_dprime: f64,
    /// Defaults to `m + 1`.
    #[serde(default)]
    pub n_period: Option<usize>,
    #[serde(default)]
    pub acceptance_target: AcceptanceTarget,
}

fn default_objective() -> Objective {
    Objective::Projection
}

fn default_solver() -> SolverKind {
    SolverKind::ActiveSet
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
}

fn default_horizon() -> usize {
    2000
}

fn default_repeats() -> usize {
    1
}

impl Default for SimBlock {
    fn default() -> Self {
        Self {
            x0: None,
            horizon: default_horizon(),
            repeats: default_repeats(),
        }
    }
}

/// The file as written.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub system: SystemBlock,
    pub constraints: ConstraintBlock,
    #[serde(default)]
    pub moas: MoasConfig,
    #[serde(default)]
    pub reduction: ReductionConfig,
    #[serde(default)]
    pub governors: BTreeMap<String, GovernorSpec>,
    pub profile: ReferenceProfile,
    #[serde(default)]
    pub sim: SimBlock,
}

/// A dimension-checked scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub system: Arc<LinearSystem>,
    pub constraints: ConstraintMap,
    pub moas: MoasConfig,
    pub reduction: ReductionConfig,
    pub governors: BTreeMap<String, GovernorSpec>,
    pub profile: ReferenceProfile,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub repeats: usize,
}

fn matrix(rows: &[Vec<f64>], what: &'static str, ncols: Option<usize>) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = ncols.unwrap_or_else(|| rows.first().map_or(0, Vec::len));
    if let Some(bad) = rows.iter().find(|row| row.len() != c) {
        return Err(Error::dim(what, c, bad.len()));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path)
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        Self::from_file(file)
    }

    /// One of the scenarios shipped with the crate: `f16` or `scalar`.
    pub fn bundled(name: &str) -> Result<Self> {
        let text = match name {
            "f16" => F16_JSON,
            "scalar" => SCALAR_JSON,
            _ => return Err(Error::InvalidConfig(format!("no bundled scenario named `{name}`"))),
        };
        Self::from_json(text, &PathBuf::from(format!("<bundled {name}>")))
    }

    pub fn from_file(f: ScenarioFile) -> Result<Self> {
        let n = f.system.a.len();
        let a = matrix(&f.system.a, "system.A row", Some(n))?;
        let b = matrix(&f.system.b, "system.B row", None)?;
        if b.nrows() != n {
            return Err(Error::dim("system.B rows", n, b.nrows()));
        }
        let m = b.ncols();
        let system = LinearSystem::new(a, b)?;

        let cc = matrix(&f.constraints.cc, "constraints.Cc row", Some(n))?;
        let dc = matrix(&f.constraints.dc, "constraints.Dc row", Some(m))?;
        let c = &f.constraints;
        let constraints = match (&c.bounds, &c.gamma_mat, &c.gamma) {
            (Some(bounds), None, None) => ConstraintMap::from_intervals(cc, dc, bounds)?,
            (None, Some(gm), Some(g)) => {
                let gm = matrix(gm, "constraints.Gamma row", Some(cc.nrows()))?;
                ConstraintMap::new(cc, dc, gm, DVector::from_column_slice(g))?
            }
            _ => {
                return Err(Error::InvalidConfig(
                    "constraints need either `bounds` or both `Gamma` and `gamma`".into(),
                ))
            }
        };
        constraints.compatible_with(&system)?;
        f.moas.validate()?;

        if f.profile.m() != m {
            return Err(Error::dim("profile reference", m, f.profile.m()));
        }
        let x0 = match &f.sim.x0 {
            Some(x0) if x0.len() != n => return Err(Error::dim("sim.x0", n, x0.len())),
            Some(x0) => DVector::from_column_slice(x0),
            None => DVector::zeros(n),
        };
        for (name, g) in &f.governors {
            if let Some(q) = &g.q {
                if q.len() != m {
                    return Err(Error::InvalidConfig(format!("governor {name}: Q must be {m}x{m}")));
                }
                matrix(q, "governor Q row", Some(m))?;
            }
        }
        Ok(Self {
            name: f.name,
            seed: f.seed,
            system: Arc::new(system),
            constraints,
            moas: f.moas,
            reduction: f.reduction,
            governors: f.governors,
            profile: f.profile,
            x0,
            horizon: f.sim.horizon,
            repeats: f.sim.repeats,
        })
    }

    pub fn n(&self) -> usize {
        self.system.n()
    }

    pub fn m(&self) -> usize {
        self.system.m()
    }

    pub fn build_moas(&self) -> Result<Moas> {
        build_moas(&self.system, &self.constraints, &self.moas)
    }

    pub fn reduce(&self, full: &SafeSet) -> Result<Reduction> {
        if full.n() != self.n() || full.m() != self.m() {
            return Err(Error::dim("reduce: set dimension", self.n() + self.m(), full.n() + full.m()));
        }
        reduce(full, &self.reduction)
    }

    /// Loads a set file written by `cgov`; the invariance tag comes from the
    /// JSON sidecar next to it (`<path>.json`) and defaults to false.
    pub fn load_set(&self, path: &Path) -> Result<SafeSet> {
        let poly = io::load(path)?;
        if poly.dim() != self.n() + self.m() {
            return Err(Error::dim("set file dimension", self.n() + self.m(), poly.dim()));
        }
        let invariant = match std::fs::read_to_string(sidecar_path(path)) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)?
                .get("invariant")
                .and_then(serde_json::Value::as_bool)
                .unwrap_or(false),
            Err(_) => false,
        };
        SafeSet::new(poly, self.n(), self.m(), invariant)
    }

    pub fn governor_spec(&self, name: &str) -> Result<&GovernorSpec> {
        self.governors.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.governors.keys().map(String::as_str).collect();
            Error::InvalidConfig(format!("unknown governor `{name}` (scenario has: {})", known.join(", ")))
        })
    }

    /// Turns a named governor entry into a runnable config; `eps_prime: "auto"` is
    /// estimated on `set` as half the sampled equilibrium margin.
    pub fn governor_config(&self, name: &str, set: &SafeSet) -> Result<GovernorConfig> {
        let g = self.governor_spec(name)?;
        let m = self.m();
        let weight = match &g.q {
            Some(q) => Weight::new(matrix(q, "governor Q row", Some(m))?)?,
            None => Weight::identity(m),
        };
        let eps_prime = match g.eps_prime {
            EpsPrime::Fixed(e) => e,
            // Only the fallback of the inexact-solver algorithm reads it.
            EpsPrime::Auto(_) if g.variant != Variant::Algorithm1 => GovernorConfig::new(g.variant, m).eps_prime,
            EpsPrime::Auto(_) => {
                let report = verify_invariance(set, &self.system, EPS_SAMPLES, 1e-9, self.seed)?;
                match report.a3_radius_estimate {
                    Some(r) if r > 0.0 => 0.5 * r,
                    _ => {
                        return Err(Error::Numerical(format!(
                            "governor {name}: could not estimate eps_prime from samples; set it explicitly"
                        )))
                    }
                }
            }
        };
        let cfg = GovernorConfig {
            weight,
            variant: g.variant,
            objective: g.objective,
            solver: g.solver,
            max_iter: g.max_iter,
            eps_prime,
            delta_prime: g.delta_prime.unwrap_or(g.delta_dprime),
            delta_dprime: g.delta_dprime,
            n_period: g.n_period.unwrap_or(m + 1),
            acceptance_target: g.acceptance_target,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn sidecar_path(set_path: &Path) -> PathBuf {
    let mut s = set_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Safe sets of a scenario, built on first use.
#[derive(Debug, Default)]
pub struct SetCache {
    pub moas: Option<Arc<SafeSet>>,
    pub reduced: Option<Arc<SafeSet>>,
}

impl SetCache {
    pub fn with_sets(moas: Option<SafeSet>, reduced: Option<SafeSet>) -> Self {
        Self {
            moas: moas.map(Arc::new),
            reduced: reduced.map(Arc::new),
        }
    }

    pub fn moas(&mut self, sc: &Scenario) -> Result<Arc<SafeSet>> {
        if self.moas.is_none() {
            self.moas = Some(Arc::new(sc.build_moas()?.set));
        }
        Ok(self.moas.clone().expect("just built"))
    }

    pub fn reduced(&mut self, sc: &Scenario) -> Result<Arc<SafeSet>> {
        if self.reduced.is_none() {
            let full = self.moas(sc)?;
            self.reduced = Some(Arc::new(sc.reduce(&full)?.set));
        }
        Ok(self.reduced.clone().expect("just built"))
    }

    pub fn entry(&mut self, sc: &Scenario, name: &str) -> Result<ConfigEntry> {
        let set = match sc.governor_spec(name)?.set {
            SetChoice::Moas => self.moas(sc)?,
            SetChoice::Reduced => self.reduced(sc)?,
        };
        let cfg = sc.governor_config(name, &set)?;
        Ok(ConfigEntry {
            name: name.to_string(),
            cfg,
            set,
        })
    }
}
