use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("rank error: expected a single-element tensor, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("degenerate batch: batch norm in train mode needs at least 2 samples, got {0}")]
    DegenerateBatch(usize),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("support error: {0}")]
    Support(String),
    #[error("tracker error: {0}")]
    Tracker(String),
    #[error("sampler fault: {0}")]
    SamplerFault(String),
    #[error("explorer fault: {0}")]
    ExplorerFault(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("training aborted at iteration {iteration}: {source}")]
    Aborted {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
