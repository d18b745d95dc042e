use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("preprocessing error in stratum {stratum}: {message}")]
    Preprocess { stratum: String, message: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("incompatible model: {0}")]
    IncompatibleModel(String),

    #[error("unknown biomarker `{0}`")]
    UnknownBiomarker(String),

    #[error("standardization error: {0}")]
    Standardization(String),

    #[error(
        "degrees of freedom check failed: {points} measurements but more than {threshold} \
         (curve parameters + 2 per subject) are required"
    )]
    DegreesOfFreedom { points: usize, threshold: usize },

    #[error("cannot initialize biomarker `{biomarker}`: {message}")]
    Initialization { biomarker: String, message: String },

    #[error("fit failed for {target} at iteration {iteration}: {message}")]
    Fit {
        target: String,
        iteration: usize,
        message: String,
    },

    #[error("classifier error for class {class}: {message}")]
    Classifier { class: String, message: String },

    #[error("staging error: {0}")]
    Staging(String),

    #[error("time mapping error: {0}")]
    Mapping(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    #[error("bootstrap ensemble error: {0}")]
    Ensemble(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
