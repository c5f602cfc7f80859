use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid: {0}")]
    InvalidGrid(String),

    #[error("grid: fields live on different grids")]
    GridMismatch,

    #[error("grid: axis {axis} out of range for a {dim}-dimensional grid")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error("field: {0}")]
    InvalidField(String),

    #[error("physics: {0}")]
    InvalidParams(String),

    /// The requested frequency does not admit a nontrivial action ground state.
    #[error("solver: omega = {omega} must lie below -lambda0 = {threshold}")]
    OmegaAboveThreshold { omega: f64, threshold: f64 },

    #[error("solver: flow diverged ({0}); try a smaller tau")]
    Divergence(String),

    #[error("solver: {0}")]
    InvalidConfig(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("field file {path}: {reason}")]
    FieldFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
