//! Pulse priors: the subject template placed at beat locations, with optional
//! stochastic augmentation of per-beat position and amplitude.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::beats::{impute_beats, rhythm_confidence, BeatSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::template::PulseTemplate;

/// Augmentation parameters for prior construction.
///
/// `loc_shift_mag` (M) shifts each placement by an integer number of samples
/// drawn uniformly from `{-M, ..., +M}`; `amp_shift_mag` (A) adds a uniform
/// offset from `(-A, +A)` millivolts; `rows` (K) is the number of augmented
/// priors stacked as conditioning channels. `confidence_threshold` (r) gates
/// beat imputation: beats are filled from the median interval only when the
/// rhythm confidence score is below it.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct PriorParams {
    pub loc_shift_mag: usize,
    pub amp_shift_mag: f32,
    pub rows: usize,
    pub confidence_threshold: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self {
            loc_shift_mag: 2,
            amp_shift_mag: 0.01,
            rows: 16,
            confidence_threshold: 1.0,
        }
    }
}

impl PriorParams {
    /// Degenerate augmentation: a single exact placement of the template.
    pub fn fixed(confidence_threshold: f64) -> Self {
        Self {
            loc_shift_mag: 0,
            amp_shift_mag: 0.0,
            rows: 1,
            confidence_threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(Error::InvalidParameter("prior rows (K) must be >= 1".into()));
        }
        if !(self.amp_shift_mag.is_finite() && self.amp_shift_mag >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "amplitude shift magnitude must be >= 0, got {}",
                self.amp_shift_mag
            )));
        }
        if self.confidence_threshold.is_nan() {
            return Err(Error::InvalidParameter(
                "confidence threshold must not be NaN".into(),
            ));
        }
        Ok(())
    }
}

/// One sampled placement perturbation, kept as diagnostic metadata.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorDraw {
    pub row: usize,
    pub onset: usize,
    pub shift: i64,
    pub amp: f32,
}

/// A K x L stack of template placements plus confidence metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PulsePrior {
    rows: Vec<f32>,
    k: usize,
    len: usize,
    loc_shift_mag: usize,
    amp_shift_mag: f32,
    confidence: f64,
    confidence_threshold: f64,
    used_imputed_beats: bool,
    draws: Vec<PriorDraw>,
}

impl PulsePrior {
    /// Assembles a prior from raw parts (used by deserialisation); the rows
    /// vector must hold exactly `k * len` samples.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        rows: Vec<f32>,
        k: usize,
        len: usize,
        loc_shift_mag: usize,
        amp_shift_mag: f32,
        confidence: f64,
        confidence_threshold: f64,
        used_imputed_beats: bool,
    ) -> Result<Self> {
        if k == 0 || rows.len() != k * len {
            return Err(Error::ShapeMismatch(format!(
                "prior rows: expected {k} x {len} = {} samples, got {}",
                k * len,
                rows.len()
            )));
        }
        Ok(Self {
            rows,
            k,
            len,
            loc_shift_mag,
            amp_shift_mag,
            confidence,
            confidence_threshold,
            used_imputed_beats,
            draws: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.rows[k * self.len..(k + 1) * self.len]
    }

    /// All rows, row-major.
    pub fn rows_flat(&self) -> &[f32] {
        &self.rows
    }

    pub fn loc_shift_mag(&self) -> usize {
        self.loc_shift_mag
    }

    pub fn amp_shift_mag(&self) -> f32 {
        self.amp_shift_mag
    }

    /// Rhythm confidence score of the beats the prior was built from
    /// (`+inf` when there were fewer than two intervals).
    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn confidence_threshold(&self) -> f64 {
        self.confidence_threshold
    }

    pub fn used_imputed_beats(&self) -> bool {
        self.used_imputed_beats
    }

    /// Sampled placement perturbations (empty for priors loaded from disk).
    pub fn draws(&self) -> &[PriorDraw] {
        &self.draws
    }

    fn summary(&self) -> String {
        format!(
            "prior K={} L={} M={} A={} R={:.4} imputed={}",
            self.k,
            self.len,
            self.loc_shift_mag,
            self.amp_shift_mag,
            self.confidence,
            self.used_imputed_beats
        )
    }
}

impl core::fmt::Display for PulsePrior {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.summary())
    }
}

/// Writes one row: the template placed at each (possibly shifted) onset with
/// an additive amplitude offset. Placements are written in onset order, so a
/// later beat truncates any overlap with an earlier one; everything outside
/// the placements stays zero.
fn place_row(
    row: &mut [f32],
    template: &PulseTemplate,
    onsets: &[usize],
    perturbations: &[(i64, f32)],
) {
    let len = row.len() as i64;
    let w = template.len() as i64;
    for (&onset, &(shift, amp)) in onsets.iter().zip(perturbations) {
        let start = onset as i64 + shift;
        for (j, &t) in template.waveform().iter().enumerate() {
            let pos = start + j as i64;
            if pos >= 0 && pos < len {
                row[pos as usize] = amp + t;
            }
        }
        let _ = w;
    }
}

fn beats_for_prior(
    beats: &BeatSequence,
    confidence: f64,
    threshold: f64,
) -> Result<(BeatSequence, bool)> {
    if confidence < threshold {
        Ok((impute_beats(beats)?, true))
    } else {
        Ok((beats.clone(), false))
    }
}

/// Builds the augmented pulse prior: K rows, each the template placed at all
/// beat locations with per-beat uniform shifts in position (`{-M..+M}`
/// samples) and amplitude (`(-A, +A)` mV). When the rhythm confidence score
/// is below the threshold, missing beat locations are imputed first.
/// Deterministic given `seed`; `M = A = 0, K = 1` yields the fixed prior.
pub fn build_prior(
    template: &PulseTemplate,
    beats: &BeatSequence,
    recording_len: usize,
    params: &PriorParams,
    seed: u64,
) -> Result<PulsePrior> {
    params.validate()?;
    let confidence = rhythm_confidence(beats);
    let (placed_beats, used_imputed) =
        beats_for_prior(beats, confidence, params.confidence_threshold)?;

    let onsets = placed_beats.onsets();
    let m = params.loc_shift_mag as i64;
    let a = params.amp_shift_mag;
    let mut rows = vec![0.0f32; params.rows * recording_len];
    let mut draws = Vec::with_capacity(params.rows * onsets.len());
    let mut stream = rng::stream(seed, "prior.augment");

    for k in 0..params.rows {
        let perturbations: Vec<(i64, f32)> = onsets
            .iter()
            .map(|&onset| {
                let shift = if m > 0 { stream.random_range(-m..=m) } else { 0 };
                let amp = if a > 0.0 {
                    stream.random_range(-a..a)
                } else {
                    0.0
                };
                draws.push(PriorDraw {
                    row: k,
                    onset,
                    shift,
                    amp,
                });
                (shift, amp)
            })
            .collect();
        place_row(
            &mut rows[k * recording_len..(k + 1) * recording_len],
            template,
            onsets,
            &perturbations,
        );
    }

    Ok(PulsePrior {
        rows,
        k: params.rows,
        len: recording_len,
        loc_shift_mag: params.loc_shift_mag,
        amp_shift_mag: params.amp_shift_mag,
        confidence,
        confidence_threshold: params.confidence_threshold,
        used_imputed_beats: used_imputed,
        draws,
    })
}

/// The fixed pulse prior: a single row with exact template placements and no
/// random perturbation. Equivalent to `build_prior` with `M = A = 0, K = 1`.
pub fn fixed_prior(
    template: &PulseTemplate,
    beats: &BeatSequence,
    recording_len: usize,
    confidence_threshold: f64,
) -> Result<PulsePrior> {
    let confidence = rhythm_confidence(beats);
    let (placed_beats, used_imputed) =
        beats_for_prior(beats, confidence, confidence_threshold)?;
    let onsets = placed_beats.onsets();
    let mut rows = vec![0.0f32; recording_len];
    let perturbations = vec![(0i64, 0.0f32); onsets.len()];
    place_row(&mut rows, template, onsets, &perturbations);
    Ok(PulsePrior {
        rows,
        k: 1,
        len: recording_len,
        loc_shift_mag: 0,
        amp_shift_mag: 0.0,
        confidence,
        confidence_threshold,
        used_imputed_beats: used_imputed,
        draws: Vec::new(),
    })
}
