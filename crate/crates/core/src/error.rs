use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{0}` not found")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: cannot read {value:?} as a number")]
    Parse { row: usize, column: String, value: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate ordinal scale: all values equal {0}")]
    DegenerateScale(i64),

    #[error("singular design: column `{0}` is linearly dependent on earlier columns")]
    SingularDesign(String),

    #[error("insufficient data: {n} observations for {k} parameters")]
    InsufficientData { n: usize, k: usize },

    #[error("nesting violation: restricted RSS {restricted} is below full RSS {full}")]
    NestingViolation { restricted: f64, full: f64 },

    #[error("no first stage: {0}")]
    NoFirstStage(String),

    #[error("instrument coding error: {0}")]
    Coding(String),

    #[error("zero first stage: group mean beliefs coincide ({0})")]
    ZeroFirstStage(f64),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("underdetermined fit: {distinct} distinct anchor values, need at least {needed}")]
    Underdetermined { distinct: usize, needed: usize },

    #[error("degenerate curve: no critical points and zero slope")]
    DegenerateCurve,

    #[error("anchor {anchor} lies outside the fitted domain [{lo}, {hi}]")]
    Extrapolation { anchor: f64, lo: f64, hi: f64 },

    #[error("empty baseline sample")]
    EmptyBaseline,

    #[error("degenerate baseline: all values equal {0}")]
    DegenerateBaseline(f64),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero spread: all {0} values are identical")]
    ZeroSpread(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingColumn(_) | Error::Schema(_) => "schema",
            Error::Parse { .. } => "parse",
            Error::Domain(_) => "domain",
            Error::DegenerateScale(_) => "degenerate_scale",
            Error::SingularDesign(_) => "singular_design",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::NestingViolation { .. } => "nesting_violation",
            Error::NoFirstStage(_) => "no_first_stage",
            Error::Coding(_) => "coding",
            Error::ZeroFirstStage(_) => "zero_first_stage",
            Error::Grouping(_) => "grouping",
            Error::Underdetermined { .. } => "underdetermined",
            Error::DegenerateCurve => "degenerate_curve",
            Error::Extrapolation { .. } => "extrapolation",
            Error::EmptyBaseline => "empty_baseline",
            Error::DegenerateBaseline(_) => "degenerate_baseline",
            Error::Alignment(_) => "alignment",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ZeroSpread(_) => "zero_spread",
            Error::InvalidInput(_) => "invalid_input",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
