//! Small order-statistics and float helpers used across the pipeline.
//!
//! In `no_std` builds the `num_traits::Float` import below supplies the float
//! intrinsics (`sqrt`, `exp`, ...) via `libm`; with `std` enabled the inherent
//! methods take precedence.

#![allow(unused_imports)]

use alloc::vec::Vec;
use num_traits::Float;

/// Linear-interpolated quantile of an unsorted slice, `q` in `[0, 1]`.
///
/// Uses the common convention of interpolating between order statistics at
/// rank `q * (n - 1)`. Returns `None` for an empty slice.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).expect("non-finite value in quantile"));
    let q = q.clamp(0.0, 1.0);
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Some(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Median via [`quantile`] at `q = 0.5` (mean of the two middle order
/// statistics for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    quantile(values, 0.5)
}

/// Population standard deviation (no Bessel correction).
pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(var.sqrt())
}

/// `p`-th percentile (0..=100) of `f32` samples with linear interpolation.
pub fn percentile_f32(values: &[f32], p: f64) -> Option<f64> {
    let as_f64: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    quantile(&as_f64, p / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates_between_order_statistics() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert_eq!(quantile(&v, 0.5), Some(2.5));
        // rank 0.97 * 3 = 2.91 -> 3.0 * 0.09 + 4.0 * 0.91
        let q = quantile(&v, 0.97).unwrap();
        assert!((q - (3.0 * 0.09 + 4.0 * 0.91)).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_length_is_midpoint() {
        assert_eq!(median(&[80.0, 80.0, 120.0, 80.0]), Some(80.0));
        assert_eq!(median(&[1.0, 3.0]), Some(2.0));
    }

    #[test]
    fn population_std_matches_direct_formula() {
        // deltas [80, 80, 120, 80]: mean 90, var (100+100+900+100)/4 = 300
        let s = population_std(&[80.0, 80.0, 120.0, 80.0]).unwrap();
        assert!((s - 300.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_yield_none() {
        assert_eq!(median(&[]), None);
        assert_eq!(population_std(&[]), None);
        assert_eq!(quantile(&[], 0.5), None);
    }
}
