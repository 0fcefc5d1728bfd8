//! Beat sequences, the rhythm confidence score and beat-location imputation.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Whether a beat location came from detection on the observed signal or was
/// filled in from the median inter-beat interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeatProvenance {
    Detected,
    Imputed,
}

/// Sorted beat locations within a recording, with per-beat provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BeatSequence {
    onsets: Vec<usize>,
    provenance: Vec<BeatProvenance>,
    recording_len: usize,
}

impl BeatSequence {
    /// Builds a sequence, validating that onsets are strictly increasing and
    /// within `[0, recording_len)`.
    pub fn new(
        onsets: Vec<usize>,
        provenance: Vec<BeatProvenance>,
        recording_len: usize,
    ) -> Result<Self> {
        if provenance.len() != onsets.len() {
            return Err(Error::LengthMismatch {
                context: "provenance vs onsets",
                expected: onsets.len(),
                got: provenance.len(),
            });
        }
        for (i, &o) in onsets.iter().enumerate() {
            if o >= recording_len {
                return Err(Error::InvalidParameter(alloc::format!(
                    "onset {o} out of range [0, {recording_len})"
                )));
            }
            if i > 0 && onsets[i - 1] >= o {
                return Err(Error::InvalidParameter(alloc::format!(
                    "onsets not strictly increasing at index {i}"
                )));
            }
        }
        Ok(Self {
            onsets,
            provenance,
            recording_len,
        })
    }

    /// A sequence of detected beats.
    pub fn from_detected(onsets: Vec<usize>, recording_len: usize) -> Result<Self> {
        let provenance = alloc::vec![BeatProvenance::Detected; onsets.len()];
        Self::new(onsets, provenance, recording_len)
    }

    pub fn len(&self) -> usize {
        self.onsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onsets.is_empty()
    }

    pub fn onsets(&self) -> &[usize] {
        &self.onsets
    }

    pub fn provenance(&self) -> &[BeatProvenance] {
        &self.provenance
    }

    pub fn recording_len(&self) -> usize {
        self.recording_len
    }

    pub fn imputed_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|&&p| p == BeatProvenance::Imputed)
            .count()
    }

    /// Consecutive inter-beat intervals in samples.
    pub fn intervals(&self) -> Vec<usize> {
        self.onsets.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Rhythm confidence score: population standard deviation of inter-beat
/// intervals divided by their median. Low values indicate a regular rhythm.
///
/// With fewer than two intervals there is no evidence about the rhythm, so
/// the score is `+inf`, which never clears the imputation threshold.
pub fn rhythm_confidence(beats: &BeatSequence) -> f64 {
    if beats.len() < 3 {
        return f64::INFINITY;
    }
    let deltas: Vec<f64> = beats.intervals().iter().map(|&d| d as f64).collect();
    let sigma = math::population_std(&deltas).unwrap();
    let med = math::median(&deltas).unwrap();
    if med <= 0.0 {
        return f64::INFINITY;
    }
    sigma / med
}

/// Fills in missing beat locations from the median inter-beat interval `d`:
/// any gap wider than `1.5 * d` receives `round(gap / d) - 1` evenly spaced
/// onsets, and the sequence is extended beyond the first and last onsets at
/// spacing `d` up to the recording edges. Inserted beats are flagged
/// [`BeatProvenance::Imputed`].
///
/// `d` is the lower median of the intervals: gaps caused by missed beats are
/// whole multiples of the true interval, so averaging the two middle order
/// statistics would drag `d` upward exactly when imputation is needed.
pub fn impute_beats(beats: &BeatSequence) -> Result<BeatSequence> {
    if beats.len() < 3 {
        return Err(Error::TooFewBeats {
            needed: 3,
            got: beats.len(),
        });
    }
    let mut deltas: Vec<f64> = beats.intervals().iter().map(|&d| d as f64).collect();
    deltas.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let d = deltas[(deltas.len() - 1) / 2];
    let len = beats.recording_len();

    let mut merged: Vec<(usize, BeatProvenance)> = beats
        .onsets()
        .iter()
        .copied()
        .zip(beats.provenance().iter().copied())
        .collect();

    // Interior gaps.
    for w in beats.onsets().windows(2) {
        let (a, b) = (w[0], w[1]);
        let gap = (b - a) as f64;
        if gap > 1.5 * d {
            let count = ((gap / d) + 0.5).floor() as usize - 1;
            for k in 1..=count {
                let pos = a + ((k as f64) * gap / (count + 1) as f64).round() as usize;
                if pos > a && pos < b {
                    merged.push((pos, BeatProvenance::Imputed));
                }
            }
        }
    }

    // Backward extension from the first onset.
    let first = beats.onsets()[0] as f64;
    let mut k = 1usize;
    loop {
        let pos = first - k as f64 * d;
        if pos < 0.0 {
            break;
        }
        merged.push((pos.round() as usize, BeatProvenance::Imputed));
        k += 1;
    }

    // Forward extension from the last onset.
    let last = *beats.onsets().last().unwrap() as f64;
    let mut k = 1usize;
    loop {
        let pos = last + k as f64 * d;
        if pos.round() as usize >= len {
            break;
        }
        merged.push((pos.round() as usize, BeatProvenance::Imputed));
        k += 1;
    }

    merged.sort_by_key(|&(pos, _)| pos);
    merged.dedup_by_key(|&mut (pos, _)| pos);

    let (onsets, provenance): (Vec<_>, Vec<_>) = merged.into_iter().unzip();
    BeatSequence::new(onsets, provenance, len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn detected(onsets: &[usize], len: usize) -> BeatSequence {
        BeatSequence::from_detected(onsets.to_vec(), len).unwrap()
    }

    #[test]
    fn sequence_rejects_unsorted_or_out_of_range() {
        assert!(BeatSequence::from_detected(alloc::vec![5, 5], 10).is_err());
        assert!(BeatSequence::from_detected(alloc::vec![5, 3], 10).is_err());
        assert!(BeatSequence::from_detected(alloc::vec![10], 10).is_err());
    }

    #[test]
    fn confidence_is_zero_for_constant_intervals() {
        let beats = detected(&[0, 80, 160, 240, 320], 400);
        assert_eq!(rhythm_confidence(&beats), 0.0);
    }

    #[test]
    fn confidence_matches_direct_computation() {
        // deltas [80, 80, 120, 80]: median 80, population sigma sqrt(300)
        let beats = detected(&[0, 80, 160, 280, 360], 400);
        let expected = 300.0f64.sqrt() / 80.0;
        assert!((rhythm_confidence(&beats) - expected).abs() < 1e-12);
        assert!((rhythm_confidence(&beats) - 0.2165).abs() < 1e-4);
    }

    #[test]
    fn confidence_is_infinite_below_two_intervals() {
        assert!(rhythm_confidence(&detected(&[0, 80], 200)).is_infinite());
        assert!(rhythm_confidence(&detected(&[0], 200)).is_infinite());
        assert!(rhythm_confidence(&detected(&[], 200)).is_infinite());
    }

    #[test]
    fn confidence_is_translation_invariant() {
        let a = detected(&[0, 80, 160, 280, 360], 1000);
        let b = detected(&[100, 180, 260, 380, 460], 1000);
        assert_eq!(rhythm_confidence(&a), rhythm_confidence(&b));
    }

    #[test]
    fn confidence_is_interval_scale_invariant() {
        let a = detected(&[0, 80, 160, 280, 360], 1000);
        let b = detected(&[0, 160, 320, 560, 720], 1000);
        assert!((rhythm_confidence(&a) - rhythm_confidence(&b)).abs() < 1e-12);
    }

    #[test]
    fn impute_is_identity_when_gaps_are_regular() {
        let beats = detected(&[5, 85, 165, 245], 320);
        // No interior gaps, and the edges are within d of the first/last onset.
        let out = impute_beats(&beats).unwrap();
        assert_eq!(out.onsets(), beats.onsets());
        assert_eq!(out.imputed_count(), 0);
    }

    #[test]
    fn impute_fills_a_double_gap_with_one_beat() {
        let beats = detected(&[0, 80, 240], 300);
        let out = impute_beats(&beats).unwrap();
        assert_eq!(out.onsets(), &[0, 80, 160, 240]);
        assert_eq!(out.imputed_count(), 1);
        assert_eq!(out.provenance()[2], BeatProvenance::Imputed);
    }

    #[test]
    fn impute_extends_forward_to_the_edge() {
        // d = 80, last onset 700, L = 1000: forward extension adds 780, 860, 940.
        let beats = detected(&[460, 540, 620, 700], 1000);
        let out = impute_beats(&beats).unwrap();
        let added: Vec<usize> = out
            .onsets()
            .iter()
            .copied()
            .filter(|&o| o > 700)
            .collect();
        assert_eq!(added, &[780, 860, 940]);
    }

    #[test]
    fn impute_extends_backward_to_the_edge() {
        let beats = detected(&[200, 280, 360, 440], 500);
        let out = impute_beats(&beats).unwrap();
        let added: Vec<usize> = out
            .onsets()
            .iter()
            .copied()
            .filter(|&o| o < 200)
            .collect();
        assert_eq!(added, &[40, 120]);
    }

    #[test]
    fn impute_rejects_too_few_beats() {
        let beats = detected(&[0, 80], 200);
        assert!(matches!(
            impute_beats(&beats),
            Err(Error::TooFewBeats { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn imputed_sequence_is_never_shorter() {
        let beats = detected(&[0, 80, 165, 240, 400], 500);
        let out = impute_beats(&beats).unwrap();
        assert!(out.len() >= beats.len());
    }
}
