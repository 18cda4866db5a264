//! Failure modes of the numerical pipeline.

use thiserror::Error;

/// Errors raised by the core numerics.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("degenerate metric: det g = {det:.3e} <= {eps:.3e} at node ({i}, {j})")]
    DegenerateMetric { i: usize, j: usize, det: f64, eps: f64 },

    #[error("pole-limit values inconsistent: angular spread {spread:.3e} exceeds {tol:.3e}")]
    PoleInconsistency { spread: f64, tol: f64 },

    #[error("degenerate boundary metric at boundary node {j}")]
    DegenerateBoundaryMetric { j: usize },

    #[error("point at distance {dist:.3e} from the support exceeds the tubular radius {radius:.3e}")]
    OutsideTubularNeighborhood { dist: f64, radius: f64 },

    #[error("Newton iteration diverged after {iters} steps (residual {residual:.3e})")]
    NewtonDivergence { iters: usize, residual: f64 },

    #[error(
        "reference does not satisfy the free boundary conditions: \
         |d^S| = {distance:.3e}, |<nu, N^S>| = {orthogonality:.3e}, natural condition = {natural:.3e} \
         (tolerance {tol:.3e})"
    )]
    ReferenceNotFreeBoundary {
        distance: f64,
        orthogonality: f64,
        natural: f64,
        tol: f64,
    },

    #[error("collar width 2*alpha0 = {width:.3e} exceeds the usable collar {max:.3e}")]
    CollarTooWide { width: f64, max: f64 },

    #[error("chart perturbation too large: sampled C1 norm {norm:.3e} >= {bound:.3e}")]
    ChartPerturbationTooLarge { norm: f64, bound: f64 },

    #[error("height field leaves the chart: |w|_inf = {sup:.3e} >= r_bar = {r_bar:.3e}")]
    ChartExit { sup: f64, r_bar: f64 },

    #[error("xi pairing degenerate: value {value:.3e} outside [1/8, 8]")]
    PairingDegenerate { value: f64 },

    #[error("chart differential singular at boundary node {j}")]
    SingularChartDifferential { j: usize },

    #[error("constraint projection diverged: residual {residual:.3e} after {iters} iterations")]
    ConstraintProjectionDiverged { iters: usize, residual: f64 },

    #[error("linear solve failed: {reason}")]
    LinearSolveFailed { reason: String },

    #[error("non-finite state encountered at t = {t:.6e}")]
    NonFiniteState { t: f64 },

    #[error(
        "numerical differentiation noise: column {column} deviates by {deviation:.3e} \
         between steps h and h/2 (tolerance {tol:.3e})"
    )]
    DifferentiationNoise { column: usize, deviation: f64, tol: f64 },

    #[error("eigenvalue/singular-value solver failed: {reason}")]
    EigsolverFailure { reason: String },

    #[error("point is not critical: |deltaE| = {norm:.3e} >= 1e-10")]
    NotCritical { norm: f64 },

    #[error(
        "rank decision ambiguous: singular value {sigma:.3e} within a factor 3 of the \
         threshold {threshold:.3e}"
    )]
    RankAmbiguous { sigma: f64, threshold: f64 },

    #[error("Lyapunov-Schmidt solution left the validated neighborhood (|y| = {norm:.3e} > {radius:.3e})")]
    LeftNeighborhood { norm: f64, radius: f64 },

    #[error("degenerate samples: all energy gaps below {floor:.3e}")]
    DegenerateSamples { floor: f64 },

    #[error("insufficient runs: {got} provided, need at least {need} at {amplitudes} distinct amplitudes")]
    InsufficientRuns { got: usize, need: usize, amplitudes: usize },

    #[error("insufficient samples: {got} provided, need at least {need}")]
    InsufficientSamples { got: usize, need: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
