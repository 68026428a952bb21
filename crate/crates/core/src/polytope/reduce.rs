//! Simplification of a safe set: drop almost-redundant rows, then pull the
//! result back inside the original with the loosest certified scaling.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{Polytope, SafeSet, SubsetReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PullInFactor {
    Fixed(f64),
    Auto(AutoFactor),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoFactor {
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReductionConfig {
    /// Rows with slack at most this (in unit-normal distance) are removed.
    pub slack_threshold: f64,
    /// Pull-in center in `(x, v)`; the origin when absent.
    pub pull_in_center: Option<Vec<f64>>,
    pub factor: PullInFactor,
    /// Lower end of the factor bisection.
    pub factor_floor: f64,
    /// Bisection stops once the bracket is this narrow.
    pub factor_tol: f64,
    /// Tolerance of the containment LPs.
    pub containment_tol: f64,
}

impl Default for ReductionConfig {
    fn default() -> Self {
        Self {
            slack_threshold: 1e-3,
            pull_in_center: None,
            factor: PullInFactor::Auto(AutoFactor::Auto),
            factor_floor: 0.9,
            factor_tol: 1e-3,
            containment_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reduction {
    pub set: SafeSet,
    pub factor: f64,
    pub certificate: SubsetReport,
    pub rows_in: usize,
    pub rows_after_drop: usize,
}

/// JSON record written next to a reduced set file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionSidecar {
    pub row_count: usize,
    pub rows_in: usize,
    pub rows_after_drop: usize,
    pub factor: f64,
    pub storage_ratio: f64,
    pub containment_certified: bool,
    pub containment_excess: f64,
    pub n: usize,
    pub m: usize,
    pub invariant: bool,
}

impl Reduction {
    pub fn sidecar(&self) -> ReductionSidecar {
        ReductionSidecar {
            row_count: self.set.rows(),
            rows_in: self.rows_in,
            rows_after_drop: self.rows_after_drop,
            factor: self.factor,
            storage_ratio: self.storage_ratio(),
            containment_certified: self.certificate.subset,
            containment_excess: self.certificate.worst_excess,
            n: self.set.n(),
            m: self.set.m(),
            invariant: false,
        }
    }

    /// Ratio of stored numbers before and after; both sets share a dimension.
    pub fn storage_ratio(&self) -> f64 {
        self.rows_in as f64 / self.set.rows().max(1) as f64
    }
}

pub fn reduce(full: &SafeSet, cfg: &ReductionConfig) -> Result<Reduction> {
    let dim = full.n() + full.m();
    let center = match &cfg.pull_in_center {
        Some(c) if c.len() != dim => return Err(Error::dim("reduce: pull-in center", dim, c.len())),
        Some(c) => DVector::from_column_slice(c),
        None => DVector::zeros(dim),
    };
    let pruned = full.poly().drop_near_redundant(cfg.slack_threshold)?;
    let check = |f: f64| -> Result<(Polytope, SubsetReport)> {
        let p = pruned.pull_in(&center, f)?;
        let report = p.is_subset(full.poly(), cfg.containment_tol)?;
        Ok((p, report))
    };

    let (poly, factor, certificate) = match cfg.factor {
        PullInFactor::Fixed(f) => {
            let (p, report) = check(f)?;
            if !report.subset {
                return Err(Error::Containment(f));
            }
            (p, f, report)
        }
        PullInFactor::Auto(_) => {
            if !(cfg.factor_floor > 0.0 && cfg.factor_floor <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "factor floor must be in (0, 1], got {}",
                    cfg.factor_floor
                )));
            }
            let (p1, r1) = check(1.0)?;
            if r1.subset {
                (p1, 1.0, r1)
            } else {
                let (mut best_p, mut best_r) = check(cfg.factor_floor)?;
                if !best_r.subset {
                    return Err(Error::Containment(cfg.factor_floor));
                }
                let (mut lo, mut hi) = (cfg.factor_floor, 1.0);
                while hi - lo > cfg.factor_tol {
                    let mid = 0.5 * (lo + hi);
                    let (p, r) = check(mid)?;
                    if r.subset {
                        lo = mid;
                        best_p = p;
                        best_r = r;
                    } else {
                        hi = mid;
                    }
                }
                (best_p, lo, best_r)
            }
        }
    };
    let rows_after_drop = pruned.rows();
    Ok(Reduction {
        set: SafeSet::new(poly, full.n(), full.m(), false)?,
        factor,
        certificate,
        rows_in: full.rows(),
        rows_after_drop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_is_unchanged() {
        let set = SafeSet::new(Polytope::cube(2, 1.0), 1, 1, true).unwrap();
        let cfg = ReductionConfig {
            slack_threshold: 0.0,
            ..Default::default()
        };
        let red = reduce(&set, &cfg).unwrap();
        assert_eq!(red.set.poly(), set.poly());
        assert_eq!(red.factor, 1.0);
        assert_eq!(red.storage_ratio(), 1.0);
        assert!(!red.set.is_invariant());
    }

    #[test]
    fn factor_parses_number_or_auto() {
        let c: ReductionConfig = serde_json::from_str(r#"{"factor": 0.95}"#).unwrap();
        assert_eq!(c.factor, PullInFactor::Fixed(0.95));
        let c: ReductionConfig = serde_json::from_str(r#"{"factor": "auto"}"#).unwrap();
        assert_eq!(c.factor, PullInFactor::Auto(AutoFactor::Auto));
    }
}
