use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The document does not follow the file schema. `pointer` is a
    /// JSON-pointer style location (`/annotations/3/box`).
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("records span more than one image ({0} and {1})")]
    MixedImage(String, String),

    #[error("annotator {0:?} has no annotations in the requested mode")]
    MissingAnnotator(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("dataset mismatch: {0}")]
    DatasetMismatch(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("value outside the domain: {0}")]
    Domain(String),

    #[error("expert subset is empty")]
    EmptySubset,

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Within-group variance is zero while group means differ; the F
    /// statistic is infinite and the p-value is 0.
    #[error("zero within-group variance with differing means (F = inf, p = 0, df = ({df_between}, {df_within}))")]
    ZeroVariance { df_between: usize, df_within: usize },

    #[error("infeasible selection: {0}")]
    Infeasible(String),

    #[error("aided simulation requires proposals on image {0:?}")]
    MissingProposals(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let pointer = err
            .position()
            .map(|p| format!("line {}", p.line()))
            .unwrap_or_else(|| "-".to_string());
        Error::Schema {
            pointer,
            message: err.to_string(),
        }
    }
}
