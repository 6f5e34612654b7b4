use thiserror::Error;

/// Errors raised by the CRIB engine, the closed forms and the CP solvers.
///
/// Numerical instability of the *model* (an infinite bound) is not an error:
/// it is reported through [`crate::crib::CribReport::finite`]. The variants
/// here signal bad input or the failure of one particular evaluation route.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum CribError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Γ₁₁ could not be inverted, so the structured paths do not apply.
    #[error("gamma_11 is numerically singular")]
    SingularGamma,

    /// `I + ΨK` could not be inverted in the structured general path.
    #[error("I + Psi*K is numerically singular")]
    SingularIb,

    #[error("fast-path hypothesis violated: gram entry ({mode}, {row}, {col}) is zero")]
    HypothesisViolated { mode: usize, row: usize, col: usize },

    #[error("S_n is numerically singular for mode {mode}")]
    SnSingular { mode: usize },

    #[error("closed form has a vanishing denominator")]
    DenominatorZero,

    #[error("|gamma_r| = 1 for r = {0}")]
    GammaUnit(usize),

    #[error("mask entry at linear index {index} is {value}, expected 0 or 1")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("damped normal equations unsolvable even with maximal damping")]
    SingularStep,

    #[error("all {0} Monte Carlo trials failed")]
    AllTrialsFailed(usize),

    #[error("infeasible correlation target: {0}")]
    InfeasibleCorrelation(String),

    #[error("column {column} of mode {mode} has zero norm")]
    ZeroNormColumn { mode: usize, column: usize },

    #[error("dense Hessian of {rows} rows exceeds the cap of {cap}")]
    TooLarge { rows: usize, cap: usize },

    #[error("format error: {0}")]
    Format(String),
}

impl CribError {
    /// `true` for failures of a computation on valid input, `false` for bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CribError::SingularGamma
                | CribError::SingularIb
                | CribError::HypothesisViolated { .. }
                | CribError::SnSingular { .. }
                | CribError::DenominatorZero
                | CribError::SingularStep
                | CribError::AllTrialsFailed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, CribError>;
