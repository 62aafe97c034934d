use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: label {label} out of range for {num_classes} classes")]
    Index { label: usize, num_classes: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("detection error: {0}")]
    Detection(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
