//! Recordings, observation masks, missingness simulation and interpolation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// A single-channel pulse recording: per-sample values, an observation mask
/// (1 = observed, 0 = missing) and uniformly spaced timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    values: Vec<f32>,
    mask: Vec<u8>,
    timestamps: Vec<f64>,
    sample_rate_hz: f64,
}

impl Recording {
    /// Builds a recording, validating the structural invariants: equal lengths
    /// (at least 1), a binary mask, and strictly increasing timestamps with
    /// uniform spacing `1 / sample_rate_hz`.
    pub fn new(
        values: Vec<f32>,
        mask: Vec<u8>,
        timestamps: Vec<f64>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("recording must not be empty".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        if mask.len() != values.len() {
            return Err(Error::LengthMismatch {
                context: "mask vs values",
                expected: values.len(),
                got: mask.len(),
            });
        }
        if timestamps.len() != values.len() {
            return Err(Error::LengthMismatch {
                context: "timestamps vs values",
                expected: values.len(),
                got: timestamps.len(),
            });
        }
        if let Some(row) = mask.iter().position(|&m| m > 1) {
            return Err(Error::InvalidParameter(format!(
                "mask entry at index {row} is {} (must be 0 or 1)",
                mask[row]
            )));
        }
        let dt = 1.0 / sample_rate_hz;
        let tol = dt * 1e-6;
        for i in 1..timestamps.len() {
            let step = timestamps[i] - timestamps[i - 1];
            if step <= 0.0 || (step - dt).abs() > tol {
                return Err(Error::InvalidParameter(format!(
                    "timestamps not uniformly spaced at 1/{sample_rate_hz} Hz near index {i} \
                     (step {step})"
                )));
            }
        }
        Ok(Self {
            values,
            mask,
            timestamps,
            sample_rate_hz,
        })
    }

    /// A fully observed recording with timestamps `i / sample_rate_hz`.
    pub fn fully_observed(values: Vec<f32>, sample_rate_hz: f64) -> Result<Self> {
        let n = values.len();
        let timestamps = (0..n).map(|i| i as f64 / sample_rate_hz).collect();
        Recording::new(values, vec![1; n], timestamps, sample_rate_hz)
    }

    /// Replaces the mask, re-validating it.
    pub fn with_mask(&self, mask: Vec<u8>) -> Result<Self> {
        Recording::new(
            self.values.clone(),
            mask,
            self.timestamps.clone(),
            self.sample_rate_hz,
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|&m| m == 1)
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0).count()
    }

    /// Observed values with missing positions zero-filled, as used for
    /// conditioning.
    pub fn observed_zero_filled(&self) -> Vec<f32> {
        self.values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m == 1 { v } else { 0.0 })
            .collect()
    }
}

/// The two missingness patterns: many short randomly placed packets
/// (information loss) or one long contiguous block (sensor detachment).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MissingnessKind {
    Transient,
    Extended,
}

impl MissingnessKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MissingnessKind::Transient => "transient",
            MissingnessKind::Extended => "extended",
        }
    }
}

/// Parameters of a simulated missingness pattern.
///
/// `packet_len_samples` applies to the transient kind only (50 ms packets are
/// 5 samples at 100 Hz).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct MissingnessSpec {
    pub kind: MissingnessKind,
    pub percentage: f64,
    pub packet_len_samples: usize,
    pub seed: u64,
}

impl Default for MissingnessSpec {
    fn default() -> Self {
        Self {
            kind: MissingnessKind::Transient,
            percentage: 0.3,
            packet_len_samples: 5,
            seed: 0,
        }
    }
}

impl MissingnessSpec {
    pub fn transient(percentage: f64, packet_len_samples: usize, seed: u64) -> Self {
        Self {
            kind: MissingnessKind::Transient,
            percentage,
            packet_len_samples,
            seed,
        }
    }

    pub fn extended(percentage: f64, seed: u64) -> Self {
        Self {
            kind: MissingnessKind::Extended,
            percentage,
            packet_len_samples: 1,
            seed,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.percentage) || !self.percentage.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "missingness percentage must be in [0, 1], got {}",
                self.percentage
            )));
        }
        if self.packet_len_samples == 0 {
            return Err(Error::InvalidParameter(
                "packet_len_samples must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Drops samples from a fully observed recording according to `spec`.
///
/// Transient: `floor(percentage * L)` zeros rounded down to a multiple of the
/// packet length, placed as non-overlapping packets chosen uniformly without
/// replacement on a packet-aligned grid. Extended: `floor(percentage * L)`
/// zeros in a single contiguous block with a uniformly random start.
/// Values and timestamps are untouched; the result is a pure function of
/// `(rec, spec)`.
pub fn apply_missingness(rec: &Recording, spec: &MissingnessSpec) -> Result<Recording> {
    spec.validate()?;
    if !rec.is_fully_observed() {
        return Err(Error::NotFullyObserved);
    }
    let len = rec.len();
    let requested = (spec.percentage * len as f64).floor() as usize;
    let mut mask = vec![1u8; len];
    let mut stream = rng::stream(spec.seed, "missingness");
    match spec.kind {
        MissingnessKind::Transient => {
            let packet = spec.packet_len_samples;
            let n_packets = requested / packet;
            let n_slots = len / packet;
            debug_assert!(n_packets <= n_slots);
            let chosen = rand::seq::index::sample(&mut stream, n_slots, n_packets);
            for slot in chosen.iter() {
                let start = slot * packet;
                for m in &mut mask[start..start + packet] {
                    *m = 0;
                }
            }
        }
        MissingnessKind::Extended => {
            if requested > 0 {
                let start = stream.random_range(0..=(len - requested));
                for m in &mut mask[start..start + requested] {
                    *m = 0;
                }
            }
        }
    }
    rec.with_mask(mask)
}

/// Fills missing runs by linear interpolation between the nearest observed
/// neighbours; leading/trailing missing runs are filled by constant extension
/// of the nearest observed value. Observed positions keep their values.
pub fn linear_interpolate(rec: &Recording) -> Result<Vec<f32>> {
    let values = rec.values();
    let mask = rec.mask();
    let mut out = values.to_vec();

    let first_obs = match mask.iter().position(|&m| m == 1) {
        Some(i) => i,
        None => return Err(Error::NoObservedSamples),
    };
    let last_obs = mask.iter().rposition(|&m| m == 1).unwrap();

    for v in out.iter_mut().take(first_obs) {
        *v = values[first_obs];
    }
    for v in out.iter_mut().skip(last_obs + 1) {
        *v = values[last_obs];
    }

    let mut prev = first_obs;
    for i in first_obs + 1..=last_obs {
        if mask[i] == 1 {
            if i > prev + 1 {
                let a = values[prev] as f64;
                let b = values[i] as f64;
                let span = (i - prev) as f64;
                for j in prev + 1..i {
                    let frac = (j - prev) as f64 / span;
                    out[j] = (a + (b - a) * frac) as f32;
                }
            }
            prev = i;
        }
    }
    Ok(out)
}
