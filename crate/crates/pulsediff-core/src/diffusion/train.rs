//! Self-supervised training of the denoiser with Adam and stepped
//! learning-rate decay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::prior::PulsePrior;
use crate::rng;

use super::denoiser::{
    denoiser_backward, denoiser_forward_with_cache, Conditioning, DenoiserParams, PriorMode,
};
use super::schedule::{forward_sample, NoiseSchedule};

/// Which positions the epsilon loss covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossMode {
    /// Only the masked (missing) positions, matching the imputation task.
    TargetOnly,
    /// Every position of the signal.
    Full,
}

/// One learning-rate decay point: from `fraction` of the total epochs onward,
/// the learning rate is the base rate times `multiplier`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LrDecayPoint {
    pub fraction: f64,
    pub multiplier: f64,
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Defaults to x0.1 at 75% and x0.01 at 90% of the total epochs.
    pub lr_decay_points: Vec<LrDecayPoint>,
    pub loss_mode: LossMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_decay_points: vec![
                LrDecayPoint {
                    fraction: 0.75,
                    multiplier: 0.1,
                },
                LrDecayPoint {
                    fraction: 0.90,
                    multiplier: 0.01,
                },
            ],
            loss_mode: LossMode::TargetOnly,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        for p in &self.lr_decay_points {
            if !(0.0..=1.0).contains(&p.fraction) || p.multiplier <= 0.0 {
                return Err(Error::InvalidParameter(
                    "decay points need fraction in [0,1] and positive multiplier".into(),
                ));
            }
        }
        Ok(())
    }

    fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.learning_rate;
        for p in &self.lr_decay_points {
            let boundary = (p.fraction * self.epochs as f64).floor() as usize;
            if epoch >= boundary {
                lr = self.learning_rate * p.multiplier;
            }
        }
        lr
    }
}

/// One training example: the full ground-truth values, the training mask
/// (1 = observed, 0 = target) and the precomputed prior.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub values: Vec<f32>,
    pub mask: Vec<u8>,
    pub prior: PulsePrior,
}

impl TrainItem {
    fn target_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 0).count()
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: DenoiserParams<f32>,
    pub trace: Vec<TraceRow>,
    /// True when a non-finite loss aborted training; `params` then holds the
    /// last state that produced a finite loss.
    pub diverged: bool,
    pub adam: AdamState,
}

/// Adam first/second-moment state (stored in checkpoints).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One Adam update with the standard bias correction
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn update(&mut self, theta: &mut [f32], grads: &[f32], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let corr1 = 1.0 - BETA1.powi(t);
        let corr2 = 1.0 - BETA2.powi(t);
        for ((w, g), (m, v)) in theta
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = *g as f64;
            let m_new = BETA1 * *m as f64 + (1.0 - BETA1) * g;
            let v_new = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
            *m = m_new as f32;
            *v = v_new as f32;
            let m_hat = m_new / corr1;
            let v_hat = v_new / corr2;
            *w -= (lr * m_hat / (v_hat.sqrt() + EPS)) as f32;
        }
    }
}

/// Squared error between the injected and predicted noise, averaged over the
/// positions the loss mode covers. `None` when no position qualifies (the
/// item is skipped).
pub fn masked_eps_loss(eps: &[f32], eps_hat: &[f32], mask: &[u8], mode: LossMode) -> Option<f64> {
    debug_assert_eq!(eps.len(), eps_hat.len());
    debug_assert_eq!(eps.len(), mask.len());
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ((&e, &p), &m) in eps.iter().zip(eps_hat).zip(mask) {
        let covered = match mode {
            LossMode::TargetOnly => m == 0,
            LossMode::Full => true,
        };
        if covered {
            let d = (e - p) as f64;
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(acc / count as f64)
    }
}

struct ItemPass {
    loss: f64,
    grads: Vec<f32>,
}

/// Forward/backward for one item with a freshly drawn step and noise.
fn item_pass<R: Rng + ?Sized>(
    params: &DenoiserParams<f32>,
    schedule: &NoiseSchedule,
    item: &TrainItem,
    mode: LossMode,
    noise_stream: &mut R,
    with_grads: bool,
) -> Result<Option<ItemPass>> {
    let len = item.values.len();
    let t: usize = noise_stream.random_range(1..=schedule.t_max());
    let mut eps = Vec::with_capacity(len);
    for _ in 0..len {
        let z: f32 = StandardNormal.sample(noise_stream);
        eps.push(z);
    }
    let covered = match mode {
        LossMode::TargetOnly => item.target_count(),
        LossMode::Full => len,
    };
    if covered == 0 {
        return Ok(None);
    }

    let x_t = forward_sample(&item.values, t, &eps, schedule)?;
    let observed = zero_filled(&item.values, &item.mask);
    let mask_f: Vec<f32> = item.mask.iter().map(|&m| m as f32).collect();
    let prior_rows = match params.config().prior_mode {
        PriorMode::Input => {
            if item.prior.k() != params.config().prior_channels {
                return Err(Error::ShapeMismatch(format!(
                    "prior has {} rows but the denoiser expects {}",
                    item.prior.k(),
                    params.config().prior_channels
                )));
            }
            item.prior.rows_flat()
        }
        PriorMode::None => &[],
    };
    let cond = Conditioning {
        observed: &observed,
        mask: &mask_f,
        prior_rows,
    };
    let (eps_hat, cache) = denoiser_forward_with_cache(params, &x_t, t, &cond)?;
    let loss = masked_eps_loss(&eps, &eps_hat, &item.mask, mode).expect("covered > 0");

    if !with_grads {
        return Ok(Some(ItemPass {
            loss,
            grads: Vec::new(),
        }));
    }

    // d loss / d eps_hat = 2 (eps_hat - eps) / covered on covered positions.
    let scale = 2.0 / covered as f64;
    let grad_out: Vec<f32> = eps_hat
        .iter()
        .zip(&eps)
        .zip(&item.mask)
        .map(|((&p, &e), &m)| {
            let in_loss = match mode {
                LossMode::TargetOnly => m == 0,
                LossMode::Full => true,
            };
            if in_loss {
                (scale * (p - e) as f64) as f32
            } else {
                0.0
            }
        })
        .collect();
    let grads = denoiser_backward(params, &cache, &grad_out);
    Ok(Some(ItemPass { loss, grads }))
}

fn zero_filled(values: &[f32], mask: &[u8]) -> Vec<f32> {
    values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m == 1 { v } else { 0.0 })
        .collect()
}

/// The training objective on a batch: per item, draw a uniform step and
/// Gaussian noise, noise the full signal and score the predicted against the
/// injected noise. Items without covered positions are skipped.
pub fn training_loss(
    params: &DenoiserParams<f32>,
    schedule: &NoiseSchedule,
    batch: &[TrainItem],
    mode: LossMode,
    seed: u64,
) -> Result<f64> {
    let mut noise_stream = rng::stream(seed, "train.noise");
    let mut total = 0.0f64;
    let mut counted = 0usize;
    for item in batch {
        if let Some(pass) = item_pass(params, schedule, item, mode, &mut noise_stream, false)? {
            total += pass.loss;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::NoTargetSamples);
    }
    Ok(total / counted as f64)
}

/// Trains the denoiser with Adam. Deterministic given the config seed: the
/// epoch shuffles and the per-item (t, eps) draws come from named streams.
/// A non-finite batch loss aborts the run, returning the parameters from
/// before the failing update.
pub fn train(
    dataset: &[TrainItem],
    init: DenoiserParams<f32>,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("empty training dataset".into()));
    }
    for item in dataset {
        if item.mask.len() != item.values.len() {
            return Err(Error::LengthMismatch {
                context: "train item mask vs values",
                expected: item.values.len(),
                got: item.mask.len(),
            });
        }
    }

    let mut params = init;
    let mut adam = AdamState::new(params.theta().len());
    let mut trace = Vec::new();
    let mut shuffle_stream = rng::stream(cfg.seed, "train.shuffle");
    let mut noise_stream = rng::stream(cfg.seed, "train.noise");
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut shuffle_stream);

        for batch_ids in order.chunks(cfg.batch_size) {
            let mut batch_loss = 0.0f64;
            let mut grads = vec![0.0f32; params.theta().len()];
            let mut counted = 0usize;
            for &idx in batch_ids {
                if let Some(pass) = item_pass(
                    &params,
                    schedule,
                    &dataset[idx],
                    cfg.loss_mode,
                    &mut noise_stream,
                    true,
                )? {
                    batch_loss += pass.loss;
                    for (g, pg) in grads.iter_mut().zip(&pass.grads) {
                        *g += pg;
                    }
                    counted += 1;
                }
            }
            if counted == 0 {
                continue;
            }
            batch_loss /= counted as f64;
            let inv = 1.0 / counted as f32;
            for g in &mut grads {
                *g *= inv;
            }

            if !batch_loss.is_finite() {
                return Ok(TrainOutput {
                    params,
                    trace,
                    diverged: true,
                    adam,
                });
            }

            adam.update(params.theta_mut(), &grads, lr);
            step += 1;
            trace.push(TraceRow {
                step,
                epoch,
                loss: batch_loss,
                lr,
            });
        }
    }

    Ok(TrainOutput {
        params,
        trace,
        diverged: false,
        adam,
    })
}
