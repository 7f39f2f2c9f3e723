use thiserror::Error;

use crate::catalog::CatalogError;
use crate::encoder::EncoderError;
use crate::metrics::MetricsError;
use crate::objectives::ObjectiveError;
use crate::ranker::RankError;
use crate::tokenizer::TokenizerError;
use crate::trainer::TrainError;

/// Crate-wide error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Rank(#[from] RankError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True when the failure came from the filesystem rather than from the
    /// content of the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Catalog(e) => matches!(e, CatalogError::Io { .. }),
            Error::Tokenizer(e) => matches!(e, TokenizerError::Io(_)),
            Error::Encoder(e) => matches!(e, EncoderError::Io(_)),
            Error::Rank(e) => matches!(e, RankError::Io { .. }),
            _ => false,
        }
    }
}
