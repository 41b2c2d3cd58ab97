use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("truncation order {needed} exceeds the hard cap {cap}; lower the squeezing or raise the cap")]
    TruncationCap { needed: usize, cap: usize },

    #[error("outcome {outcome} does not belong to the {scheme} scheme")]
    SchemeMismatch { outcome: String, scheme: String },

    #[error("omitted outcome mass {residual:.3e} exceeds 1e-6; tighten tail_tol")]
    ResidualMass { residual: f64 },

    #[error("likelihood row for outcome {0} is zero everywhere on the grid")]
    ZeroLikelihood(String),

    #[error("peak report has no secondary peak to prune")]
    NoSecondaryPeak,

    #[error("finite-difference estimates disagree ({coarse} vs {fine}); choose another step")]
    RichardsonMismatch { coarse: f64, fine: f64 },

    #[error("derivative magnitude {0:.3e} too small for error propagation")]
    DegenerateDerivative(f64),

    #[error("{failed} of {total} trials failed (limit is 1%)")]
    CampaignFailures { failed: usize, total: usize },
}
