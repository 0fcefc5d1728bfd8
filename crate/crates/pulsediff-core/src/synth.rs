//! Quasiperiodic test-signal generation with ground-truth beat locations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::beats::BeatSequence;
use crate::error::{Error, Result};
use crate::rng;
use crate::signal::Recording;

/// Beat waveform families for the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BeatMorphology {
    /// A single narrow Gaussian peak.
    GaussianQrs,
    /// Q/R/S deflections plus a low, wide T wave.
    Triphasic,
}

/// Generator parameters for a synthetic quasiperiodic recording.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub mean_interval_s: f64,
    /// Inter-beat intervals are scaled by `1 + u`, `u ~ U(-j, +j)`.
    pub interval_jitter_frac: f64,
    /// Per-beat amplitudes are scaled by `1 + v`, `v ~ U(-a, +a)`.
    pub amplitude_jitter_frac: f64,
    pub noise_std: f64,
    pub morphology: BeatMorphology,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 10.0,
            sample_rate_hz: 100.0,
            mean_interval_s: 0.8,
            interval_jitter_frac: 0.05,
            amplitude_jitter_frac: 0.1,
            noise_std: 0.05,
            morphology: BeatMorphology::GaussianQrs,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration_s", self.duration_s),
            ("sample_rate_hz", self.sample_rate_hz),
            ("mean_interval_s", self.mean_interval_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.interval_jitter_frac) {
            return Err(Error::InvalidParameter(format!(
                "interval_jitter_frac must be in [0, 1), got {}",
                self.interval_jitter_frac
            )));
        }
        if self.amplitude_jitter_frac < 0.0 || !self.amplitude_jitter_frac.is_finite() {
            return Err(Error::InvalidParameter(
                "amplitude_jitter_frac must be >= 0".into(),
            ));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::InvalidParameter("noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// One beat evaluated at `tau` seconds relative to the R peak.
fn beat_waveform(morphology: BeatMorphology, tau: f64) -> f64 {
    let g = |center: f64, width: f64| {
        let z = (tau - center) / width;
        (-0.5 * z * z).exp()
    };
    match morphology {
        BeatMorphology::GaussianQrs => g(0.0, 0.015),
        BeatMorphology::Triphasic => {
            -0.2 * g(-0.04, 0.012) + g(0.0, 0.015) - 0.3 * g(0.04, 0.012) + 0.25 * g(0.25, 0.06)
        }
    }
}

/// Half-width of the beat kernel support in seconds.
fn beat_support(morphology: BeatMorphology) -> f64 {
    match morphology {
        BeatMorphology::GaussianQrs => 0.08,
        BeatMorphology::Triphasic => 0.5,
    }
}

/// Generates a quasiperiodic recording plus the ground-truth beat peak
/// locations. Deterministic given `seed`; the interval, amplitude and noise
/// streams are independent, so e.g. changing `noise_std` does not move beats.
pub fn synth_ecg(cfg: &SynthConfig, seed: u64) -> Result<(Recording, BeatSequence)> {
    cfg.validate()?;
    let fs = cfg.sample_rate_hz;
    let len = (cfg.duration_s * fs).round() as usize;
    if len == 0 {
        return Err(Error::InvalidParameter(
            "duration too short for one sample".into(),
        ));
    }

    let mut interval_stream = rng::stream(seed, "synth.intervals");
    let mut amp_stream = rng::stream(seed, "synth.amplitudes");
    let mut noise_stream = rng::stream(seed, "synth.noise");

    // First peak lands at a random phase within the first interval.
    let phase: f64 = interval_stream.random_range(0.25..0.75);
    let mut peak = (phase * cfg.mean_interval_s * fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    while peak < len {
        peaks.push(peak);
        let u: f64 = if cfg.interval_jitter_frac > 0.0 {
            interval_stream.random_range(-cfg.interval_jitter_frac..cfg.interval_jitter_frac)
        } else {
            0.0
        };
        let gap = (fs * cfg.mean_interval_s * (1.0 + u)).round().max(1.0) as usize;
        peak += gap;
    }

    let mut values = vec![0.0f64; len];
    let support = (beat_support(cfg.morphology) * fs).ceil() as isize;
    for &p in &peaks {
        let v: f64 = if cfg.amplitude_jitter_frac > 0.0 {
            amp_stream.random_range(-cfg.amplitude_jitter_frac..cfg.amplitude_jitter_frac)
        } else {
            0.0
        };
        let amp = 1.0 + v;
        for off in -support..=support {
            let idx = p as isize + off;
            if idx >= 0 && (idx as usize) < len {
                let tau = off as f64 / fs;
                values[idx as usize] += amp * beat_waveform(cfg.morphology, tau);
            }
        }
    }

    if cfg.noise_std > 0.0 {
        for v in &mut values {
            let z: f64 = StandardNormal.sample(&mut noise_stream);
            *v += cfg.noise_std * z;
        }
    }

    let values: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
    let rec = Recording::fully_observed(values, fs)?;
    let truth = BeatSequence::from_detected(peaks, len)?;
    Ok((rec, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_free_gaps_are_exactly_the_rounded_interval() {
        let cfg = SynthConfig {
            interval_jitter_frac: 0.0,
            amplitude_jitter_frac: 0.0,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let (_, truth) = synth_ecg(&cfg, 11).unwrap();
        let expected = (0.8 * 100.0f64).round() as usize;
        for gap in truth.intervals() {
            assert_eq!(gap, expected);
        }
    }

    #[test]
    fn ten_seconds_at_point_eight_gives_twelve_or_thirteen_beats() {
        let cfg = SynthConfig::default();
        for seed in 0..20 {
            let (_, truth) = synth_ecg(&cfg, seed).unwrap();
            assert!(
                truth.len() == 12 || truth.len() == 13,
                "seed {seed}: got {} beats",
                truth.len()
            );
        }
    }

    #[test]
    fn zero_amplitude_jitter_gives_equal_peaks() {
        let cfg = SynthConfig {
            interval_jitter_frac: 0.0,
            amplitude_jitter_frac: 0.0,
            noise_std: 0.0,
            ..SynthConfig::default()
        };
        let (rec, truth) = synth_ecg(&cfg, 5).unwrap();
        let peaks: Vec<f32> = truth.onsets().iter().map(|&p| rec.values()[p]).collect();
        for &p in &peaks {
            assert!((p - peaks[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let (a, ta) = synth_ecg(&cfg, 9).unwrap();
        let (b, tb) = synth_ecg(&cfg, 9).unwrap();
        assert_eq!(a.values(), b.values());
        assert_eq!(ta.onsets(), tb.onsets());
    }

    #[test]
    fn onsets_are_in_range_and_increasing() {
        for seed in 0..30 {
            let cfg = SynthConfig {
                interval_jitter_frac: 0.2,
                ..SynthConfig::default()
            };
            let (rec, truth) = synth_ecg(&cfg, seed).unwrap();
            let onsets = truth.onsets();
            assert!(!onsets.is_empty());
            for w in onsets.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(*onsets.last().unwrap() < rec.len());
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SynthConfig {
            mean_interval_s: 0.0,
            ..SynthConfig::default()
        };
        assert!(synth_ecg(&cfg, 0).is_err());
        let cfg = SynthConfig {
            interval_jitter_frac: 1.0,
            ..SynthConfig::default()
        };
        assert!(synth_ecg(&cfg, 0).is_err());
    }
}
