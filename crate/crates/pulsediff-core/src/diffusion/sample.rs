//! Iterative reverse-process sampling for imputation.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::prior::PulsePrior;
use crate::rng;
use crate::signal::Recording;

use super::denoiser::{denoiser_forward, Conditioning, DenoiserParams, PriorMode};
use super::schedule::{reverse_step, NoiseSchedule};

/// Sampler options.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputeOptions {
    /// Number of reverse-process draws to aggregate.
    pub n_samples: usize,
    /// Per-sample quantile bands to report alongside the median.
    pub quantiles: Vec<f64>,
    pub seed: u64,
}

impl Default for ImputeOptions {
    fn default() -> Self {
        Self {
            n_samples: 4,
            quantiles: alloc::vec![0.05, 0.95],
            seed: 0,
        }
    }
}

/// Whether the sampler actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImputeStatus {
    Imputed,
    /// The recording had no missing samples; it is returned unchanged.
    NothingMissing,
}

/// Aggregated output of the reverse sampler. Observed positions of every draw
/// and of the point estimate carry the ground-truth observed values.
#[derive(Debug, Clone)]
pub struct ImputationResult {
    pub samples: Vec<Vec<f32>>,
    pub point_estimate: Vec<f32>,
    /// `(q, per-sample quantile)` pairs in the order requested.
    pub quantiles: Vec<(f64, Vec<f32>)>,
    pub status: ImputeStatus,
}

/// Imputes the missing samples of `rec` by running the reverse process
/// `n_samples` times from Gaussian noise, conditioning the denoiser on the
/// observed values, the mask and the prior rows. Draws aggregate into a
/// per-sample median plus quantile bands. Deterministic given the seed.
pub fn impute(
    rec: &Recording,
    prior: Option<&PulsePrior>,
    params: &DenoiserParams<f32>,
    schedule: &NoiseSchedule,
    opts: &ImputeOptions,
) -> Result<ImputationResult> {
    if opts.n_samples == 0 {
        return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
    }
    for &q in &opts.quantiles {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::InvalidParameter(format!(
                "quantile {q} outside [0, 1]"
            )));
        }
    }
    let len = rec.len();
    let prior_rows: &[f32] = match params.config().prior_mode {
        PriorMode::Input => {
            let prior = prior.ok_or_else(|| {
                Error::InvalidParameter("prior conditioning required but no prior given".into())
            })?;
            if prior.k() != params.config().prior_channels {
                return Err(Error::ShapeMismatch(format!(
                    "prior has {} rows but the denoiser expects {}",
                    prior.k(),
                    params.config().prior_channels
                )));
            }
            if prior.len() != len {
                return Err(Error::LengthMismatch {
                    context: "prior length vs recording",
                    expected: len,
                    got: prior.len(),
                });
            }
            prior.rows_flat()
        }
        PriorMode::None => &[],
    };

    if rec.missing_count() == 0 {
        return Ok(ImputationResult {
            samples: Vec::new(),
            point_estimate: rec.values().to_vec(),
            quantiles: opts
                .quantiles
                .iter()
                .map(|&q| (q, rec.values().to_vec()))
                .collect(),
            status: ImputeStatus::NothingMissing,
        });
    }

    let observed = rec.observed_zero_filled();
    let mask_f: Vec<f32> = rec.mask().iter().map(|&m| m as f32).collect();
    let cond = Conditioning {
        observed: &observed,
        mask: &mask_f,
        prior_rows,
    };

    let mut samples = Vec::with_capacity(opts.n_samples);
    for draw in 0..opts.n_samples {
        let mut stream = rng::substream(opts.seed, "impute.draw", draw as u64);
        let mut x: Vec<f32> = (0..len)
            .map(|_| StandardNormal.sample(&mut stream))
            .collect();
        for t in (1..=schedule.t_max()).rev() {
            let eps_hat = denoiser_forward(params, &x, t, &cond)?;
            x = reverse_step(&x, t, &eps_hat, schedule, &mut stream)?;
        }
        for (v, (&truth, &m)) in x.iter_mut().zip(rec.values().iter().zip(rec.mask())) {
            if m == 1 {
                *v = truth;
            }
        }
        samples.push(x);
    }

    let mut point_estimate = Vec::with_capacity(len);
    let mut quantiles: Vec<(f64, Vec<f32>)> = opts
        .quantiles
        .iter()
        .map(|&q| (q, Vec::with_capacity(len)))
        .collect();
    let mut column = Vec::with_capacity(opts.n_samples);
    for i in 0..len {
        column.clear();
        column.extend(samples.iter().map(|s| s[i] as f64));
        point_estimate.push(math::median(&column).unwrap() as f32);
        for (q, band) in &mut quantiles {
            band.push(math::quantile(&column, *q).unwrap() as f32);
        }
    }
    for (v, (&truth, &m)) in point_estimate
        .iter_mut()
        .zip(rec.values().iter().zip(rec.mask()))
    {
        if m == 1 {
            *v = truth;
        }
    }

    Ok(ImputationResult {
        samples,
        point_estimate,
        quantiles,
        status: ImputeStatus::Imputed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beats::BeatSequence;
    use crate::prior::fixed_prior;
    use crate::signal::{apply_missingness, MissingnessSpec};
    use crate::synth::{synth_ecg, SynthConfig};
    use crate::template::PulseTemplate;

    use super::super::denoiser::DenoiserConfig;

    fn setup() -> (Recording, PulsePrior, DenoiserParams<f32>, NoiseSchedule) {
        let cfg = SynthConfig {
            duration_s: 3.0,
            ..SynthConfig::default()
        };
        let (rec, truth) = synth_ecg(&cfg, 21).unwrap();
        let masked = apply_missingness(&rec, &MissingnessSpec::transient(0.3, 5, 4)).unwrap();
        let tpl =
            PulseTemplate::new(rec.values()[..40].to_vec(), rec.sample_rate_hz(), 10).unwrap();
        let beats = BeatSequence::from_detected(truth.onsets().to_vec(), rec.len()).unwrap();
        let prior = fixed_prior(&tpl, &beats, rec.len(), 1.0).unwrap();
        let dcfg = DenoiserConfig {
            residual_blocks: 2,
            channels: 8,
            kernel: 3,
            dilation_cycle: 2,
            step_embed_dim: 16,
            prior_channels: 1,
            prior_mode: PriorMode::Input,
        };
        let params = DenoiserParams::<f32>::init(dcfg, 77).unwrap();
        let schedule = NoiseSchedule::preset_quadratic_t50();
        (masked, prior, params, schedule)
    }

    #[test]
    fn single_draw_with_fixed_seed_is_deterministic() {
        let (rec, prior, params, schedule) = setup();
        let opts = ImputeOptions {
            n_samples: 1,
            quantiles: alloc::vec![],
            seed: 5,
        };
        let a = impute(&rec, Some(&prior), &params, &schedule, &opts).unwrap();
        let b = impute(&rec, Some(&prior), &params, &schedule, &opts).unwrap();
        assert_eq!(a.point_estimate, b.point_estimate);
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn observed_positions_carry_the_ground_truth() {
        let (rec, prior, params, schedule) = setup();
        let opts = ImputeOptions {
            n_samples: 3,
            ..ImputeOptions::default()
        };
        let out = impute(&rec, Some(&prior), &params, &schedule, &opts).unwrap();
        assert_eq!(out.status, ImputeStatus::Imputed);
        assert_eq!(out.samples.len(), 3);
        for (i, &m) in rec.mask().iter().enumerate() {
            if m == 1 {
                assert_eq!(out.point_estimate[i], rec.values()[i]);
                for s in &out.samples {
                    assert_eq!(s[i], rec.values()[i]);
                }
            }
        }
    }

    #[test]
    fn fully_observed_recordings_come_back_unchanged_with_a_warning() {
        let (rec, prior, params, schedule) = setup();
        let full = rec.with_mask(alloc::vec![1; rec.len()]).unwrap();
        let out = impute(&full, Some(&prior), &params, &schedule, &ImputeOptions::default())
            .unwrap();
        assert_eq!(out.status, ImputeStatus::NothingMissing);
        assert_eq!(out.point_estimate, full.values());
        assert!(out.samples.is_empty());
    }

    #[test]
    fn mismatched_prior_k_is_rejected() {
        let (rec, prior, _, schedule) = setup();
        let cfg = DenoiserConfig {
            residual_blocks: 2,
            channels: 8,
            kernel: 3,
            dilation_cycle: 2,
            step_embed_dim: 16,
            prior_channels: 4,
            prior_mode: PriorMode::Input,
        };
        let params = DenoiserParams::<f32>::init(cfg, 1).unwrap();
        let err = impute(&rec, Some(&prior), &params, &schedule, &ImputeOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch(_)));
    }

    #[test]
    fn prior_free_models_run_without_a_prior() {
        let (rec, _, _, schedule) = setup();
        let cfg = DenoiserConfig {
            residual_blocks: 2,
            channels: 8,
            kernel: 3,
            dilation_cycle: 2,
            step_embed_dim: 16,
            prior_channels: 1,
            prior_mode: PriorMode::None,
        };
        let params = DenoiserParams::<f32>::init(cfg, 1).unwrap();
        let out = impute(&rec, None, &params, &schedule, &ImputeOptions::default()).unwrap();
        assert_eq!(out.status, ImputeStatus::Imputed);
    }

    #[test]
    fn quantile_bands_bracket_the_median_on_missing_positions() {
        let (rec, prior, params, schedule) = setup();
        let opts = ImputeOptions {
            n_samples: 8,
            quantiles: alloc::vec![0.1, 0.9],
            seed: 2,
        };
        let out = impute(&rec, Some(&prior), &params, &schedule, &opts).unwrap();
        let (_, lo) = &out.quantiles[0];
        let (_, hi) = &out.quantiles[1];
        for (i, &m) in rec.mask().iter().enumerate() {
            if m == 0 {
                assert!(lo[i] <= out.point_estimate[i] + 1e-6);
                assert!(hi[i] >= out.point_estimate[i] - 1e-6);
            }
        }
    }
}
