//! Closed-loop linear model `x(t+1) = A x(t) + B v(t)` and its output constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SCHUR_TOL: f64 = 1e-9;

/// Pre-stabilized closed-loop system driven by the governed command `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    /// `(I - A)^{-1} B`, the command-to-equilibrium map.
    dc_gain: DMatrix<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dim("LinearSystem: A columns", n, a.ncols()));
        }
        if b.nrows() != n {
            return Err(Error::dim("LinearSystem: B rows", n, b.nrows()));
        }
        if b.ncols() == 0 {
            return Err(Error::InvalidConfig("B must have at least one column".into()));
        }
        let rho = spectral_radius(&a);
        if !(rho < 1.0 - SCHUR_TOL) {
            return Err(Error::NotSchur(rho));
        }
        let dc_gain = (DMatrix::identity(n, n) - &a)
            .lu()
            .solve(&b)
            .ok_or(Error::NotSchur(rho))?;
        Ok(Self { a, b, dc_gain })
    }

    pub fn from_rows(n: usize, m: usize, a: &[f64], b: &[f64]) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::dim("LinearSystem: A entries", n * n, a.len()));
        }
        if b.len() != n * m {
            return Err(Error::dim("LinearSystem: B entries", n * m, b.len()));
        }
        Self::new(
            DMatrix::from_row_slice(n, n, a),
            DMatrix::from_row_slice(n, m, b),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn dc_gain(&self) -> &DMatrix<f64> {
        &self.dc_gain
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    pub fn step(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(x, v)?;
        Ok(&self.a * x + &self.b * v)
    }

    /// Steady state `x_v = (I - A)^{-1} B v` reached under a constant command.
    pub fn equilibrium(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.m() {
            return Err(Error::dim("equilibrium: command", self.m(), v.len()));
        }
        Ok(&self.dc_gain * v)
    }

    fn check(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::dim("step: state", self.n(), x.len()));
        }
        if v.len() != self.m() {
            return Err(Error::dim("step: command", self.m(), v.len()));
        }
        Ok(())
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Output constraints `Gamma (Cc x + Dc v) <= gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMap {
    cc: DMatrix<f64>,
    dc: DMatrix<f64>,
    gamma_mat: DMatrix<f64>,
    gamma: DVector<f64>,
}

impl ConstraintMap {
    pub fn new(
        cc: DMatrix<f64>,
        dc: DMatrix<f64>,
        gamma_mat: DMatrix<f64>,
        gamma: DVector<f64>,
    ) -> Result<Self> {
        let p = cc.nrows();
        if dc.nrows() != p {
            return Err(Error::dim("ConstraintMap: Dc rows", p, dc.nrows()));
        }
        if gamma_mat.ncols() != p {
            return Err(Error::dim("ConstraintMap: Gamma columns", p, gamma_mat.ncols()));
        }
        if gamma.len() != gamma_mat.nrows() {
            return Err(Error::dim("ConstraintMap: gamma", gamma_mat.nrows(), gamma.len()));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "constraint bounds must be strictly positive so the origin is interior, got {g}"
            )));
        }
        Ok(Self {
            cc,
            dc,
            gamma_mat,
            gamma,
        })
    }

    /// Box constraints `lo_i <= y_i <= hi_i`, expanded to two rows per output
    /// (`+e_i`, then `-e_i`).
    pub fn from_intervals(cc: DMatrix<f64>, dc: DMatrix<f64>, bounds: &[(f64, f64)]) -> Result<Self> {
        let p = cc.nrows();
        if bounds.len() != p {
            return Err(Error::dim("ConstraintMap: interval bounds", p, bounds.len()));
        }
        let mut gamma_mat = DMatrix::zeros(2 * p, p);
        let mut gamma = DVector::zeros(2 * p);
        for (i, &(lo, hi)) in bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::InvalidConfig(format!("empty interval [{lo}, {hi}] for output {i}")));
            }
            gamma_mat[(2 * i, i)] = 1.0;
            gamma[2 * i] = hi;
            gamma_mat[(2 * i + 1, i)] = -1.0;
            gamma[2 * i + 1] = -lo;
        }
        Self::new(cc, dc, gamma_mat, gamma)
    }

    pub fn cc(&self) -> &DMatrix<f64> {
        &self.cc
    }

    pub fn dc(&self) -> &DMatrix<f64> {
        &self.dc
    }

    pub fn gamma_mat(&self) -> &DMatrix<f64> {
        &self.gamma_mat
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn n(&self) -> usize {
        self.cc.ncols()
    }

    pub fn m(&self) -> usize {
        self.dc.ncols()
    }

    pub fn rows(&self) -> usize {
        self.gamma.len()
    }

    pub fn compatible_with(&self, sys: &LinearSystem) -> Result<()> {
        if self.n() != sys.n() {
            return Err(Error::dim("ConstraintMap: Cc columns", sys.n(), self.n()));
        }
        if self.m() != sys.m() {
            return Err(Error::dim("ConstraintMap: Dc columns", sys.m(), self.m()));
        }
        Ok(())
    }

    /// Per-row values of `Gamma (Cc x + Dc v) - gamma`.
    pub fn residuals(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n() {
            return Err(Error::dim("constraint_margin: state", self.n(), x.len()));
        }
        if v.len() != self.m() {
            return Err(Error::dim("constraint_margin: command", self.m(), v.len()));
        }
        let y = &self.cc * x + &self.dc * v;
        Ok(&self.gamma_mat * y - &self.gamma)
    }

    /// Largest constraint residual; `<= 0` iff `(x, v)` is admissible.
    pub fn margin(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        Ok(self.residuals(x, v)?.max())
    }
}

/// A state together with the command applied at it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCommandPair {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl StateCommandPair {
    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.x.len() + self.v.len(), self.x.iter().chain(&self.v).copied())
    }
}
