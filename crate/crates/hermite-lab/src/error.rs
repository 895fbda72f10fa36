use thiserror::Error;

/// Unified error type for the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter: {0}")]
    BadParameter(String),

    #[error("Hurst range must stay inside (1/2, 1); got [{lo}, {hi}]")]
    HurstRange { lo: f64, hi: f64 },

    #[error("work estimate {estimated:.3e} exceeds budget {budget:.3e} ({context})")]
    BudgetExceeded {
        estimated: f64,
        budget: f64,
        context: String,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("kernel evaluated on its singularity (some x equals s = {s})")]
    SingularEvaluation { s: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type LabResult<T> = Result<T, LabError>;

/// Non-fatal diagnostics attached to numerical results. These never abort a
/// computation; they tell the caller which knob to turn before trusting more
/// digits.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Warning {
    /// Doubling the cell count moved the result by more than the quoted
    /// relative threshold.
    GridTooCoarse { rel_change: f64, threshold: f64 },
    /// Mass beyond the truncation boundary is a non-negligible fraction of
    /// the reported quantity.
    TruncationDominates { tail_fraction: f64, threshold: f64 },
    /// Too few samples land in the region being summarized.
    Undersampled { context: String },
    /// The requested scale runs into the sampling resolution of the input.
    ResolutionLimited { context: String },
    /// Heavy-tailed summand detected while averaging (negative moments).
    HeavyTail { context: String },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::GridTooCoarse {
                rel_change,
                threshold,
            } => write!(
                f,
                "grid too coarse: doubling cells changes result by {rel_change:.3e} (> {threshold:.1e})"
            ),
            Warning::TruncationDominates {
                tail_fraction,
                threshold,
            } => write!(
                f,
                "truncation dominates: tail fraction {tail_fraction:.3e} (> {threshold:.1e})"
            ),
            Warning::Undersampled { context } => write!(f, "undersampled: {context}"),
            Warning::ResolutionLimited { context } => write!(f, "resolution limited: {context}"),
            Warning::HeavyTail { context } => write!(f, "heavy tail: {context}"),
        }
    }
}
