//! Error type shared by every estimator in the crate.
//!
//! Each variant carries a stable machine-readable code (see [`Error::code`])
//! and maps onto one of three failure classes used by the command-line
//! front-end: configuration, data and solver errors.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Solver,
}

#[derive(Debug, Error)]
pub enum Error {
    // --- data / panel ---
    #[error("missing cell for unit {unit} at time {time}")]
    MissingCell { unit: String, time: i64 },
    #[error("unbalanced panel: {0}")]
    UnbalancedPanel(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unknown outcome column `{0}`")]
    UnknownColumn(String),
    #[error("intervention time {0} leaves fewer than 2 pre-periods or no post-period")]
    T0OutOfRange(i64),
    #[error("non-numeric or invalid outcome value on data row {row}: `{value}`")]
    NonNumericOutcome { row: usize, value: String },
    #[error("donor pool is empty")]
    EmptyDonorPool,
    #[error("duplicate unit `{0}` in donor list")]
    DuplicateUnit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // --- estimator preconditions ---
    #[error("need at least {needed} pre-intervention periods, have {have}")]
    InsufficientPrePeriods { needed: usize, have: usize },
    #[error("need at least {needed} observations on each side of the break, have {have}")]
    InsufficientObservations { needed: usize, have: usize },
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("negative live-birth count {0}")]
    NegativeBirths(f64),
    #[error("donor pool of {0} units is too large for grid enumeration (max 4)")]
    DonorPoolTooLarge(usize),
    #[error("requested factor count {requested} exceeds effective rank {rank}")]
    RankDeficiency { requested: usize, rank: usize },
    #[error("{donors} donor(s) cannot support a rank interval at level {level}")]
    TooFewDonorsForLevel { donors: usize, level: f64 },
    #[error("placebo variance needs at least 2 donors, have {0}")]
    TooFewDonorsForPlaceboVariance(usize),
    #[error("every placebo fit failed")]
    AllPlacebosFailed,
    #[error("no placebo survives the MSPE filter")]
    NoSurvivingPlacebos,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // --- numerical ---
    #[error("QP solver did not converge after {iterations} iterations (KKT residual {residual:.3e})")]
    SolverNonConvergence { iterations: usize, residual: f64 },
    #[error("iterative fit did not converge after {0} iterations")]
    NonConvergence(usize),
}

impl Error {
    /// Stable identifier written into machine-readable error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingCell { .. } => "missing_cell",
            Error::UnbalancedPanel(_) => "unbalanced_panel",
            Error::UnknownUnit(_) => "unknown_unit",
            Error::UnknownColumn(_) => "unknown_column",
            Error::T0OutOfRange(_) => "t0_out_of_range",
            Error::NonNumericOutcome { .. } => "non_numeric_outcome",
            Error::EmptyDonorPool => "empty_donor_pool",
            Error::DuplicateUnit(_) => "duplicate_unit",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::InsufficientPrePeriods { .. } => "insufficient_pre_periods",
            Error::InsufficientObservations { .. } => "insufficient_observations",
            Error::SingularDesign => "singular_design",
            Error::NegativeBirths(_) => "negative_births",
            Error::DonorPoolTooLarge(_) => "donor_pool_too_large",
            Error::RankDeficiency { .. } => "rank_deficiency",
            Error::TooFewDonorsForLevel { .. } => "too_few_donors_for_level",
            Error::TooFewDonorsForPlaceboVariance(_) => "too_few_donors_for_placebo_variance",
            Error::AllPlacebosFailed => "all_placebos_failed",
            Error::NoSurvivingPlacebos => "no_surviving_placebos",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::SolverNonConvergence { .. } => "solver_non_convergence",
            Error::NonConvergence(_) => "non_convergence",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Config,
            Error::SolverNonConvergence { .. }
            | Error::NonConvergence(_)
            | Error::SingularDesign
            | Error::RankDeficiency { .. }
            | Error::AllPlacebosFailed => ErrorClass::Solver,
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
