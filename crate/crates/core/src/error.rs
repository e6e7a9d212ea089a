use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid label set: {0}")]
    InvalidLabels(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("grid specs differ: {0}")]
    SpecMismatch(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("flip along {0} is not a horizontal axis")]
    InvalidFlipAxis(&'static str),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("need {needed} frames, have {available}")]
    InsufficientFrames { needed: usize, available: usize },
    #[error("no valid mask index for history length {0} (need at least 2)")]
    NoValidMask(usize),
    #[error("infeasible scene configuration: {0}")]
    Infeasible(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("duplicate cell index {0} in scatter")]
    DuplicateCell(usize),
    #[error("parameter {0} not found")]
    MissingParam(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}
