use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward needs a scalar loss, got {0} elements")]
    NotScalar(usize),
    #[error("{frames} frames is shorter than the subsampling factor {factor}")]
    TooShort { frames: usize, factor: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("every frame of the utterance is masked")]
    EmptyUtterance,
    #[error("CTC alignment infeasible: {frames} frames, at least {required} required")]
    InfeasibleAlignment { frames: usize, required: usize },
    #[error("CTC target contains the blank id")]
    BlankInTarget,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("speed perturbation leaves fewer than one frame")]
    DegenerateLength,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("empty reference with a non-empty hypothesis")]
    EmptyReference,
    #[error("empty corpus")]
    EmptyCorpus,
}
