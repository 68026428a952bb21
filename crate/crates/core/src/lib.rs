//! Command and reference governors for constrained linear discrete-time
//! closed-loop systems.
//!
//! The crate builds the safe sets a governor needs (the finitely determined
//! admissible set and reduced variants of it), solves the small dense QPs of
//! the command projection, and implements the governor step laws: scalar
//! reference governor, conventional command governor, the modified command
//! governor with its accept-or-hold rule, and the inexact-solver algorithm
//! with its proximity fallback. [`sim`] wires these into a closed-loop
//! harness; `cgov` is the command-line front end.

pub mod error;
pub mod governor;
pub mod model;
pub mod moas;
pub mod polytope;
pub mod qp;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
pub use model::{ConstraintMap, LinearSystem, StateCommandPair};
pub use moas::{build_moas, verify_invariance, Moas, MoasConfig};
pub use polytope::{CrossSection, Polytope, SafeSet};
