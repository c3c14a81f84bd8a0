use thiserror::Error;

/// Everything that can go wrong inside the library.
///
/// The variant names double as the `error` field of the CLI's JSON error
/// object, so renaming one is a format change.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("moment matrix has numerical rank {rank} < k = {k}")]
    MomentRankDeficient { rank: usize, k: usize },
    #[error("variance of the recentred AR statistic is degenerate ({value:e})")]
    DegenerateVariance { value: f64 },
    #[error("need more clusters than moments: H = {h}, k = {k}")]
    ClusterTooFew { h: usize, k: usize },
    #[error("weighting matrix Z'D^2Z is numerically singular")]
    SingularWeighting,
    #[error("score variance is not positive definite (min eigenvalue {min_eig:e})")]
    NonPdVariance { min_eig: f64 },
    #[error("instruments lose rank after partialling out controls")]
    ControlRankLoss,
    #[error("moment column {column} is identically zero")]
    AllCensored { column: usize },
    #[error("all moment conditions are zero at this parameter")]
    ZeroMoments,
    #[error("Hermite order {order} is even; only odd orders are symmetric")]
    EvenOrderRejected { order: usize },
    #[error("matrix argument {which} must have a zero diagonal")]
    DiagonalNotZero { which: usize },
    #[error("sign enumeration limited to n <= 24, got {n}")]
    NTooLarge { n: usize },
    #[error("HFUL: {0}")]
    SingularHful(String),
    #[error("linear IV design needs k >= 5 instruments, got {k}")]
    KTooSmall { k: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MomentRankDeficient { .. } => "MomentRankDeficient",
            Error::DegenerateVariance { .. } => "DegenerateVariance",
            Error::ClusterTooFew { .. } => "ClusterTooFew",
            Error::SingularWeighting => "SingularWeighting",
            Error::NonPdVariance { .. } => "NonPdVariance",
            Error::ControlRankLoss => "ControlRankLoss",
            Error::AllCensored { .. } => "AllCensored",
            Error::ZeroMoments => "ZeroMoments",
            Error::EvenOrderRejected { .. } => "EvenOrderRejected",
            Error::DiagonalNotZero { .. } => "DiagonalNotZero",
            Error::NTooLarge { .. } => "NTooLarge",
            Error::SingularHful(_) => "SingularHful",
            Error::KTooSmall { .. } => "KTooSmall",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::InvalidInput(_) => "InvalidInput",
        }
    }

    /// True for failures caused by the numbers rather than by malformed input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::MomentRankDeficient { .. }
                | Error::DegenerateVariance { .. }
                | Error::SingularWeighting
                | Error::NonPdVariance { .. }
                | Error::ControlRankLoss
                | Error::AllCensored { .. }
                | Error::ZeroMoments
                | Error::SingularHful(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
