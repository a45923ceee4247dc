use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::gridworld::GridError;
use crate::teacher::TeacherError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: &'static str, message: String },
    #[error("no trainable pairs: every preference is a tie")]
    NoTrainablePairs,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("human-teacher mode needs a label source")]
    NoLabelSource,
    #[error("label source closed before the session was complete")]
    LabelSourceClosed,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
