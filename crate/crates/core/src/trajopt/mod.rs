//! Constrained trajectory optimization: DDP dynamics block, IK block, projection
//! block and their ADMM orchestration.

pub mod admm;
pub mod ddp;
pub mod ik;
pub mod problem;
pub mod projection;
pub mod trace;

pub use admm::{solve, AdmmConfig, AdmmSolution, Initialization, Variant};
pub use problem::{Limits, ProblemSpec, Weights};
pub use trace::{ConvergenceTrace, TraceRow};
