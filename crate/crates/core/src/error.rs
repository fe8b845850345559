//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants carry enough context
//! to report a failure without re-running the computation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Coordinates fall outside the chart's admissible box.
    #[error("point outside chart domain: {0}")]
    PointOutsideChart(String),

    /// Coordinates hit a chart degeneracy (pole band of a colatitude, ball boundary).
    #[error("coordinate singularity: {0}")]
    CoordinateSingularity(String),

    /// An integration left the chart domain; the truncated prefix is preserved.
    #[error("geodesic left chart domain at t = {t:.6}")]
    LeftChartDomain {
        t: f64,
        samples: Vec<(f64, crate::manifold::ChartPoint)>,
    },

    /// Adaptive step control shrank the step below the hard floor.
    #[error("step size underflow at t = {0:.6}")]
    StepSizeUnderflow(f64),

    /// The two-point connection solver exhausted its starts without converging.
    #[error("no geodesic connection found: {0}")]
    NoSolutionFound(String),

    /// Side lengths cannot come from a geodesic triangle.
    #[error("triangle inequality violation: sides ({0:.6}, {1:.6}, {2:.6})")]
    TriangleInequalityViolation(f64, f64, f64),

    /// Perimeter too large for the positively curved model space.
    #[error("perimeter {perimeter:.6} exceeds the model-space limit {limit:.6}")]
    PerimeterTooLarge { perimeter: f64, limit: f64 },

    /// Two triangle vertices coincide to working precision.
    #[error("degenerate vertex pair at distance {0:.3e}")]
    DegenerateVertex(f64),

    /// Rejection sampling failed to produce an admissible configuration.
    #[error("sampling budget exceeded: {0}")]
    SamplingBudgetExceeded(String),

    /// Ratio parameter below the admissible threshold.
    #[error("nu = {nu} is below the admissible threshold {threshold}")]
    NuBelowThreshold { nu: f64, threshold: f64 },

    /// Angle argument outside (0, pi].
    #[error("invalid theta: {0}")]
    InvalidTheta(f64),

    /// Generic invalid input combination.
    #[error("invalid inputs: {0}")]
    InvalidInputs(String),

    /// Operation has no closed form for this manifold kind.
    #[error("unsupported manifold for this operation: {0}")]
    UnsupportedManifold(String),

    /// Lattice vector enumeration grew past its budget.
    #[error("enumeration budget exceeded: {0}")]
    EnumerationBudgetExceeded(String),

    /// No partner point within the pairing radius.
    #[error("pairing failure: {0}")]
    PairingFailure(String),

    /// Ball quadrature rejected too many samples.
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    /// Projection target is farther from the embedded image than the estimated reach.
    #[error("point outside estimated reach: residual {residual:.3e} > reach {reach:.3e}")]
    OutsideReach { residual: f64, reach: f64 },

    /// An optimizer failed to converge.
    #[error("optimizer divergence: {0}")]
    OptimizerDivergence(String),

    /// Measured configuration violates the hypotheses of the check being run.
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    /// A precondition of the requested check fails on the given data.
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    /// Configuration file or override is malformed.
    #[error("config error: {0}")]
    ConfigInvalid(String),

    /// Scalar argument outside its admissible range.
    #[error("argument out of range: {0}")]
    ArgumentOutOfRange(String),

    /// Value does not fit the requested integer width.
    #[error("integer overflow: {0}")]
    Overflow(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
