//! Core algorithms for imputing missing intervals in quasiperiodic pulsative
//! signals (ECG and similar) with a conditional denoising diffusion model
//! guided by a subject-level pulse-template prior.
//!
//! The crate is organised around the stages of the imputation pipeline:
//!
//! - [`signal`]: recordings, observation masks, missingness simulation and
//!   linear interpolation of the observed samples.
//! - [`synth`]: a quasiperiodic test-signal generator with ground-truth beat
//!   locations.
//! - [`template`]: QRS detection, matched filtering and two-pass extraction
//!   of a subject's median beat waveform.
//! - [`beats`]: beat sequences, the rhythm confidence score and median-interval
//!   beat imputation.
//! - [`prior`]: placement of the pulse template at beat locations, with
//!   optional stochastic augmentation of position and amplitude.
//! - [`diffusion`]: noise schedules, the conditional denoiser, training and
//!   the iterative reverse sampler.
//! - [`eval`]: reconstruction and beat-detection metrics, the template
//!   baseline and missingness sweeps.
//!
//! Everything here is deterministic given explicit seeds and usable without
//! the standard library (`default-features = false`); file formats and the
//! command-line interface live in the companion `pulsediff` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod beats;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod prior;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod template;

mod math;

pub use beats::{impute_beats, rhythm_confidence, BeatProvenance, BeatSequence};
pub use error::{Error, Result};
pub use eval::{
    beat_metrics, masked_mse, match_beats, run_sweep, template_baseline_impute, EvalReport,
    EvalRow, ModelSpec, SweepConfig, SweepItem,
};
pub use prior::{build_prior, fixed_prior, PriorDraw, PriorParams, PulsePrior};
pub use signal::{
    apply_missingness, linear_interpolate, MissingnessKind, MissingnessSpec, Recording,
};
pub use synth::{synth_ecg, BeatMorphology, SynthConfig};
pub use template::{
    build_external_template, christov_detect, cross_correlate, extract_template,
    matched_filter_detect, normalized_cross_correlation, two_pass_template, PulseTemplate,
    SubjectTemplate,
};
