//! Factorized structure-preserving doubling for discrete-time algebraic
//! Riccati equations whose coefficients are banded plus low rank.
//!
//! The solver keeps every iterate as `D + L K L^T` with `D` banded, `L` tall
//! and `K` small, so the cost per step stays linear in the order `N`.

pub mod banded;
pub mod config;
pub mod cost;
pub mod engine;
pub mod error;
pub mod factor;
pub mod io;
pub mod oracle;
pub mod problem;
pub mod reduction;
pub mod residual;

pub use banded::{band_inv_approx, band_solve, make_gh_helpers, BandLu, BandedMatrix, HelperSet};
pub use config::{Denominator, SolverConfig};
pub use cost::CostCounters;
pub use engine::{advance, init_state, FsdaState, StepReport, Widths};
pub use error::{FsdaError, Result};
pub use factor::{merge_columns, reconstruct, BlockKernel, Move, Role, Segment, TallFactor};
pub use problem::{gen_instance, read_problem, write_problem, DareProblem};
pub use reduction::{apply_ptc, monitor_prune, ptc_qr, PtcOutcome};
pub use residual::{banded_residual, lowrank_residual, solve, CallEvent, ResidualReport, Solution};
