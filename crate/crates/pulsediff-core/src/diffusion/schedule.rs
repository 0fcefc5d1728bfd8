//! Noise schedules and the closed-form forward / single reverse diffusion
//! steps.

use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Interpolation family for the per-step variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ScheduleKind {
    /// Straight-line interpolation of the betas.
    Linear,
    /// Interpolation in sqrt-beta space, squared.
    Quadratic,
}

/// A diffusion noise schedule: betas with the derived alphas and their
/// cumulative products, indexed 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps T.
    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::StepOutOfRange {
                t,
                t_max: self.t_max(),
            });
        }
        Ok(())
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `alpha_bar_t = prod_{s<=t} alpha_s`, 1-based.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// `alpha_bar_{t-1}` with the convention `alpha_bar_0 = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t <= 1 {
            1.0
        } else {
            self.alpha_bars[t - 2]
        }
    }

    /// Reverse-process variance `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn reverse_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_prev(t)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    /// Quadratic schedule, T = 50, betas 1e-4 to 0.5.
    pub fn preset_quadratic_t50() -> Self {
        make_schedule(ScheduleKind::Quadratic, 50, 1e-4, 0.5).expect("valid preset")
    }

    /// Linear schedule, T = 200, betas 1e-4 to 0.02.
    pub fn preset_linear_t200() -> Self {
        make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).expect("valid preset")
    }
}

/// Builds a schedule with betas interpolated from `beta_1` to `beta_t_max`
/// over `t_max` steps. With `t_max == 1` the single beta is `beta_1`.
pub fn make_schedule(
    kind: ScheduleKind,
    t_max: usize,
    beta_1: f64,
    beta_t_max: f64,
) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::InvalidParameter("schedule needs T >= 1".into()));
    }
    if !(0.0 < beta_1 && beta_1 < beta_t_max && beta_t_max < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < beta_1 < beta_T < 1, got beta_1={beta_1}, beta_T={beta_t_max}"
        )));
    }
    let betas: Vec<f64> = (0..t_max)
        .map(|i| {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            match kind {
                ScheduleKind::Linear => beta_1 + frac * (beta_t_max - beta_1),
                ScheduleKind::Quadratic => {
                    let root = beta_1.sqrt() + frac * (beta_t_max.sqrt() - beta_1.sqrt());
                    root * root
                }
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_max);
    let mut product = 1.0;
    for &a in &alphas {
        product *= a;
        alpha_bars.push(product);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alphas,
        alpha_bars,
    })
}

/// Closed-form forward noising: `sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_sample<F: Float>(
    x0: &[F],
    t: usize,
    eps: &[F],
    schedule: &NoiseSchedule,
) -> Result<Vec<F>> {
    schedule.check(t)?;
    if eps.len() != x0.len() {
        return Err(Error::LengthMismatch {
            context: "eps vs x0",
            expected: x0.len(),
            got: eps.len(),
        });
    }
    let abar = schedule.alpha_bar(t);
    let scale = F::from(abar.sqrt()).unwrap();
    let noise_scale = F::from((1.0 - abar).sqrt()).unwrap();
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| scale * x + noise_scale * e)
        .collect())
}

/// One reverse step: the parameterized posterior mean
/// `mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)` plus
/// Gaussian noise with the closed-form variance. The final step (`t == 1`)
/// adds no noise.
pub fn reverse_step<F, R>(
    x_t: &[F],
    t: usize,
    eps_hat: &[F],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<F>>
where
    F: Float,
    R: Rng + ?Sized,
    StandardNormal: Distribution<F>,
{
    schedule.check(t)?;
    if eps_hat.len() != x_t.len() {
        return Err(Error::LengthMismatch {
            context: "eps_hat vs x_t",
            expected: x_t.len(),
            got: eps_hat.len(),
        });
    }
    let beta = schedule.beta(t);
    let abar = schedule.alpha_bar(t);
    let eps_coef = F::from(beta / (1.0 - abar).sqrt()).unwrap();
    let inv_sqrt_alpha = F::from(1.0 / schedule.alpha(t).sqrt()).unwrap();
    let sigma = F::from(schedule.reverse_variance(t).sqrt()).unwrap();

    let mut out = Vec::with_capacity(x_t.len());
    for (&x, &e) in x_t.iter().zip(eps_hat) {
        let mean = (x - eps_coef * e) * inv_sqrt_alpha;
        let value = if t > 1 {
            let z: F = StandardNormal.sample(rng);
            mean + sigma * z
        } else {
            mean
        };
        out.push(value);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn degenerate_single_step_schedule_uses_beta_one() {
        let s = make_schedule(ScheduleKind::Linear, 1, 1e-4, 0.02).unwrap();
        assert_eq!(s.betas(), &[1e-4]);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
    }

    #[test]
    fn linear_schedule_interpolates_exactly() {
        let s = make_schedule(ScheduleKind::Linear, 200, 1e-4, 0.02).unwrap();
        // beta_100 = 1e-4 + (99/199) * 0.0199 = 0.0100 exactly.
        let expected = 1e-4 + 99.0 / 199.0 * (0.02 - 1e-4);
        assert!((s.beta(100) - expected).abs() < 1e-15);
        assert!((s.beta(100) - 0.01).abs() < 1e-12);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(200), 0.02);
    }

    #[test]
    fn quadratic_schedule_hits_the_endpoints_exactly() {
        let s = make_schedule(ScheduleKind::Quadratic, 50, 1e-4, 0.5).unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(50) - 0.5).abs() < 1e-15);
        // Interior values follow sqrt-space interpolation.
        let root = (1e-4f64).sqrt() + 24.0 / 49.0 * ((0.5f64).sqrt() - (1e-4f64).sqrt());
        assert!((s.beta(25) - root * root).abs() < 1e-15);
    }

    #[test]
    fn schedules_are_strictly_increasing_with_decreasing_alpha_bar() {
        for s in [
            NoiseSchedule::preset_quadratic_t50(),
            NoiseSchedule::preset_linear_t200(),
        ] {
            for t in 2..=s.t_max() {
                assert!(s.beta(t) > s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta(t) < 1.0);
            }
        }
    }

    #[test]
    fn invalid_beta_ordering_is_rejected() {
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.02, 0.0001).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.0, 0.02).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 10, 0.5, 1.0).is_err());
        assert!(make_schedule(ScheduleKind::Linear, 0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn alpha_bar_cumulative_product_matches_direct_recomputation() {
        for s in [
            NoiseSchedule::preset_quadratic_t50(),
            NoiseSchedule::preset_linear_t200(),
        ] {
            for t in 1..=s.t_max() {
                let direct: f64 = (1..=t).map(|u| 1.0 - s.beta(u)).product();
                let rel = ((s.alpha_bar(t) - direct) / direct).abs();
                assert!(rel < 1e-12, "t={t}: rel error {rel}");
            }
        }
    }

    #[test]
    fn forward_sample_without_noise_scales_by_sqrt_alpha_bar() {
        let s = NoiseSchedule::preset_linear_t200();
        let x0 = [1.0f64, -2.0, 0.5];
        let eps = [0.0f64; 3];
        let out = forward_sample(&x0, 17, &eps, &s).unwrap();
        let scale = s.alpha_bar(17).sqrt();
        for (o, x) in out.iter().zip(&x0) {
            assert!((o - scale * x).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_sample_at_step_one_matches_the_known_coefficients() {
        // beta_1 = 1e-4: abar_1 = 0.9999, sqrt(abar) ~= 0.99995, sqrt(1-abar) = 0.01.
        let s = NoiseSchedule::preset_linear_t200();
        let out = forward_sample(&[1.0f64], 1, &[1.0f64], &s).unwrap();
        assert!((out[0] - (0.99995 + 0.01)).abs() < 1e-5);
    }

    #[test]
    fn forward_sample_approaches_pure_noise_at_the_end_of_a_hard_schedule() {
        let s = NoiseSchedule::preset_quadratic_t50();
        let t = s.t_max();
        let abar = s.alpha_bar(t);
        assert!(abar < 1e-4);
        let out = forward_sample(&[5.0f64], t, &[1.0f64], &s).unwrap();
        // |out - eps| <= sqrt(abar)*|x0| + (1 - sqrt(1-abar)) -> 0 with abar.
        assert!((out[0] - 1.0).abs() <= 5.0 * abar.sqrt() + abar + 1e-12);
    }

    #[test]
    fn forward_sample_rejects_out_of_range_steps() {
        let s = NoiseSchedule::preset_quadratic_t50();
        assert!(forward_sample(&[0.0f64], 0, &[0.0], &s).is_err());
        assert!(forward_sample(&[0.0f64], 51, &[0.0], &s).is_err());
    }

    #[test]
    fn final_reverse_step_is_deterministic_with_zero_variance() {
        let s = NoiseSchedule::preset_quadratic_t50();
        assert_eq!(s.reverse_variance(1), 0.0);
        let mut r1 = rng::stream(1, "a");
        let mut r2 = rng::stream(2, "b");
        let a = reverse_step(&[0.7f64, -0.1], 1, &[0.3, 0.2], &s, &mut r1).unwrap();
        let b = reverse_step(&[0.7f64, -0.1], 1, &[0.3, 0.2], &s, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reverse_step_at_t1_inverts_forward_sample_exactly() {
        // With eps_hat equal to the true noise, x0 is recovered algebraically:
        // abar_1 = alpha_1, so (x1 - beta_1/sqrt(1-abar_1) eps)/sqrt(alpha_1) = x0.
        let s = NoiseSchedule::preset_quadratic_t50();
        let x0 = [0.25f64, -1.5, 3.0];
        let eps = [0.9f64, -0.3, 0.05];
        let x1 = forward_sample(&x0, 1, &eps, &s).unwrap();
        let mut r = rng::stream(0, "z");
        let rec = reverse_step(&x1, 1, &eps, &s, &mut r).unwrap();
        for (a, b) in rec.iter().zip(&x0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reverse_variance_is_below_beta_everywhere() {
        for s in [
            NoiseSchedule::preset_quadratic_t50(),
            NoiseSchedule::preset_linear_t200(),
        ] {
            for t in 1..=s.t_max() {
                assert!(s.reverse_variance(t) < s.beta(t));
                // Closed-form assertion of the variance expression itself.
                let direct = (1.0 - s.alpha_bar_prev(t)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
                assert_eq!(s.reverse_variance(t), direct);
            }
        }
    }

    #[test]
    fn reverse_step_rejects_out_of_range_steps() {
        let s = NoiseSchedule::preset_quadratic_t50();
        let mut r = rng::stream(0, "z");
        assert!(reverse_step(&[0.0f64], 0, &[0.0], &s, &mut r).is_err());
        assert!(reverse_step(&[0.0f64], 51, &[0.0], &s, &mut r).is_err());
    }
}
