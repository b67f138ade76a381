use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not unitary (max deviation {0:e})")]
    NotUnitary(f64),

    #[error("unsupported photon number: expected {expected}, found {found}")]
    UnsupportedPhotonNumber { expected: usize, found: usize },

    #[error("visibility {0} outside [0, 1]")]
    VisibilityOutOfRange(f64),

    #[error("probability vectors are not aligned on the same basis")]
    BasisMismatch,

    #[error("coupler reflectivity {0} outside (0, 1)")]
    ReflectivityOutOfRange(f64),

    #[error("outcome efficiency {0} outside (0, 1]")]
    EfficiencyOutOfRange(f64),

    #[error("resistor {index}: current-dependent denominator {denominator} is not positive")]
    ThermalBreakdown { index: usize, denominator: f64 },

    #[error("resistor {index}: power {power:.3} mW exceeds limit {limit:.3} mW")]
    PowerLimitExceeded { index: usize, power: f64, limit: f64 },

    #[error("resistor {index}: negative power {power}")]
    NegativePower { index: usize, power: f64 },

    #[error("target phases not reachable within the power budget (residual {residual:e} rad)")]
    Unreachable { residual: f64 },

    #[error("matrix is singular")]
    Singular,

    #[error("likelihood returned a non-finite or negative probability")]
    InvalidProbability,

    #[error("every grid point has a singular Fisher matrix")]
    AllSingular,

    #[error("total posterior weight underflowed")]
    WeightUnderflow,

    #[error("predictive outcome distribution is degenerate")]
    DegeneratePredictive,

    #[error("outcome index {index} out of range for {count} outcomes")]
    OutcomeOutOfRange { index: usize, count: usize },

    #[error("i/o: {0}")]
    Io(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
