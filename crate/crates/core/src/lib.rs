//! Monte Carlo solvers for backward stochastic differential equations whose
//! generator depends on the past of the solution through a delay measure.
//!
//! The numerical core is generic over the floating point type (see
//! [`Scalar`]); the `*64` aliases fix it to `f64`.

pub mod closed_form;
pub mod delay;
pub mod error;
pub mod experiments;
pub mod generator;
pub mod girsanov;
pub mod grid;
pub mod lsmc;
pub mod picard;
pub mod scalar;
pub mod stats;

pub use closed_form::{
    classify_example1, classify_example2, solve_dirac_z, solve_example1, solve_example2, solve_linear_z,
    ClosedFormSolution, ExistenceClass, LinearZSolution, MeanInfo, TerminalSpec, Verdict,
};
pub use delay::{DelayMeasure, GridWeights};
pub use error::{Error, Result};
pub use experiments::{ExperimentReport, ExperimentVerdict, StoppingRule};
pub use generator::{GFunction, Generator, GeneratorKind, PastSegment};
pub use girsanov::{density, q_expectation, q_shifted_ensemble, DensityPath, DriftSpec};
pub use grid::{simulate_paths, PathEnsemble, TimeGrid};
pub use lsmc::{
    conditional_expectation, martingale_representation, regression_tolerance, residual_check,
    GridSolution, RegressionBasis, Representation, ResidualReport,
};
pub use picard::{
    contraction_bound, optimize_beta, picard_solve, picard_solve_from, weighted_norms, ConvergenceReport,
    ConvergenceVerdict, PicardOutcome, SolverConfig,
};
pub use scalar::Scalar;
pub use stats::{Estimate, Proportion};

pub type TimeGrid64 = TimeGrid<f64>;
pub type PathEnsemble64 = PathEnsemble<f64>;
pub type DelayMeasure64 = DelayMeasure<f64>;
pub type Generator64 = Generator<f64>;
pub type GridSolution64 = GridSolution<f64>;
pub type SolverConfig64 = SolverConfig<f64>;
pub type DriftSpec64 = DriftSpec<f64>;
