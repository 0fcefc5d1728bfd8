//! Error type shared by all pipeline stages.

use alloc::string::String;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors reported by the core pipeline operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A configuration or argument value violates its documented contract.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vectors that must share a length do not.
    #[error("length mismatch: {context} (expected {expected}, got {got})")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation that requires a fully observed recording was handed one
    /// with missing samples.
    #[error("recording already has missing samples")]
    NotFullyObserved,

    /// No observed samples are available to interpolate from.
    #[error("recording has no observed samples")]
    NoObservedSamples,

    /// The signal is shorter than the operation's warm-up requirement.
    #[error("signal too short: need at least {needed} samples, got {got}")]
    SignalTooShort { needed: usize, got: usize },

    /// A matched-filter template with zero samples was supplied.
    #[error("empty template")]
    EmptyTemplate,

    /// Fewer beats than the operation needs to make progress.
    #[error("too few beats: need at least {needed}, got {got}")]
    TooFewBeats { needed: usize, got: usize },

    /// Detection produced no beats at all.
    #[error("no beats detected")]
    NoBeatsDetected,

    /// A diffusion step index outside `1..=T`.
    #[error("diffusion step {t} out of range 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },

    /// Tensor or conditioning shapes disagree with the model configuration.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A metric over target positions was requested but the mask marks none.
    #[error("no target (missing) positions in mask")]
    NoTargetSamples,
}
