//! Reconstruction and beat-detection metrics, the template baseline and
//! missingness sweeps.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::beats::BeatSequence;
use crate::diffusion::{impute, DenoiserParams, ImputeOptions, NoiseSchedule, PriorMode};
use crate::error::{Error, Result};
use crate::prior::{build_prior, fixed_prior, PriorParams, PulsePrior};
use crate::rng;
use crate::signal::{apply_missingness, MissingnessKind, MissingnessSpec, Recording};
use crate::template::{matched_filter_detect, onsets_to_peaks, two_pass_template, PulseTemplate};

/// Mean squared error over the target (missing) positions only.
pub fn masked_mse(imputed: &[f32], truth: &[f32], mask: &[u8]) -> Result<f64> {
    if imputed.len() != truth.len() || mask.len() != truth.len() {
        return Err(Error::LengthMismatch {
            context: "masked_mse inputs",
            expected: truth.len(),
            got: imputed.len().max(mask.len()),
        });
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for ((&a, &b), &m) in imputed.iter().zip(truth).zip(mask) {
        if m == 0 {
            let d = (a - b) as f64;
            acc += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoTargetSamples);
    }
    Ok(acc / count as f64)
}

/// The template baseline: observed values pass through, missing positions are
/// read from the prior's first row (build it with `M = A = 0` for the exact
/// fixed-prior baseline).
pub fn template_baseline_impute(rec: &Recording, prior: &PulsePrior) -> Result<Vec<f32>> {
    if prior.len() != rec.len() {
        return Err(Error::LengthMismatch {
            context: "prior length vs recording",
            expected: rec.len(),
            got: prior.len(),
        });
    }
    let fixed_row = prior.row(0);
    Ok(rec
        .values()
        .iter()
        .zip(rec.mask())
        .zip(fixed_row)
        .map(|((&v, &m), &p)| if m == 1 { v } else { p })
        .collect())
}

/// One-to-one greedy matching in ascending time: each true beat takes the
/// nearest unmatched prediction within the tolerance (ties to the lower
/// index). Returns `(tp, fp, fn)`.
pub fn match_beats(pred: &[usize], truth: &[usize], tol_samples: usize) -> (usize, usize, usize) {
    let mut used = alloc::vec![false; pred.len()];
    let mut tp = 0usize;
    for &t in truth {
        let mut best: Option<(usize, usize)> = None; // (distance, index)
        for (i, &p) in pred.iter().enumerate() {
            if used[i] {
                continue;
            }
            let d = p.abs_diff(t);
            if d <= tol_samples {
                let better = match best {
                    None => true,
                    Some((bd, _)) => d < bd,
                };
                if better {
                    best = Some((d, i));
                }
            }
        }
        if let Some((_, i)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    let fp = pred.len() - tp;
    let fn_ = truth.len() - tp;
    (tp, fp, fn_)
}

/// Precision, sensitivity and F1 from match counts, with explicit
/// zero-denominator conventions (all zero when undefined).
pub fn beat_metrics(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let sensitivity = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    };
    (f1, precision, sensitivity)
}

/// Per-recording evaluation results.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub recording: usize,
    pub mse: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    /// Set when this recording failed for this model; the row is then
    /// excluded from the aggregates.
    pub error: Option<String>,
}

/// Aggregated metric row for one (model, kind, percentage) cell. Aggregation
/// is the unweighted mean of the per-recording metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub kind: MissingnessKind,
    pub percentage: f64,
    pub mse: f64,
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub n_recordings: usize,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    fn from_rows(
        model: String,
        kind: MissingnessKind,
        percentage: f64,
        rows: Vec<EvalRow>,
    ) -> Self {
        let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.error.is_none()).collect();
        let n = ok.len();
        let mean = |f: &dyn Fn(&EvalRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                ok.iter().map(|r| f(r)).sum::<f64>() / n as f64
            }
        };
        EvalReport {
            model,
            kind,
            percentage,
            mse: mean(&|r| r.mse),
            f1: mean(&|r| r.f1),
            precision: mean(&|r| r.precision),
            sensitivity: mean(&|r| r.sensitivity),
            n_recordings: n,
            rows,
        }
    }
}

/// An imputation model under evaluation.
pub enum ModelSpec {
    /// Missing positions filled with zeros.
    ZeroFill,
    /// Missing positions read from the fixed pulse prior.
    TemplateBaseline,
    /// A trained denoiser sampled through the reverse process.
    Diffusion {
        label: String,
        params: DenoiserParams<f32>,
        schedule: NoiseSchedule,
        prior: PriorParams,
        n_samples: usize,
    },
}

impl ModelSpec {
    pub fn label(&self) -> &str {
        match self {
            ModelSpec::ZeroFill => "zero_fill",
            ModelSpec::TemplateBaseline => "template",
            ModelSpec::Diffusion { label, .. } => label,
        }
    }
}

/// One evaluation item: a fully observed recording and its true beat peaks.
pub struct SweepItem {
    pub recording: Recording,
    pub truth_beats: BeatSequence,
}

/// Sweep settings.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub kinds: Vec<MissingnessKind>,
    pub percentages: Vec<f64>,
    pub packet_len_samples: usize,
    /// Beat-matching tolerance (50 ms by default).
    pub tolerance_s: f64,
    /// Confidence threshold used for the evaluation priors.
    pub confidence_threshold: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kinds: alloc::vec![MissingnessKind::Transient, MissingnessKind::Extended],
            percentages: alloc::vec![0.1, 0.2, 0.3, 0.4, 0.5],
            packet_len_samples: 5,
            tolerance_s: 0.050,
            confidence_threshold: 1.0,
            seed: 0,
        }
    }
}

fn evaluate_one(
    model: &ModelSpec,
    item: &SweepItem,
    masked: &Recording,
    external: &PulseTemplate,
    cfg: &SweepConfig,
    prior_seed: u64,
) -> Result<(f64, usize, usize, usize)> {
    let subject = two_pass_template(masked, external)?;
    let imputed: Vec<f32> = match model {
        ModelSpec::ZeroFill => masked.observed_zero_filled(),
        ModelSpec::TemplateBaseline => {
            let prior = fixed_prior(
                &subject.template,
                &subject.beats,
                masked.len(),
                cfg.confidence_threshold,
            )?;
            template_baseline_impute(masked, &prior)?
        }
        ModelSpec::Diffusion {
            params,
            schedule,
            prior,
            n_samples,
            ..
        } => {
            let prior_stack = match params.config().prior_mode {
                PriorMode::Input => Some(build_prior(
                    &subject.template,
                    &subject.beats,
                    masked.len(),
                    prior,
                    prior_seed,
                )?),
                PriorMode::None => None,
            };
            let opts = ImputeOptions {
                n_samples: *n_samples,
                quantiles: alloc::vec![],
                seed: prior_seed,
            };
            impute(masked, prior_stack.as_ref(), params, schedule, &opts)?.point_estimate
        }
    };

    let mse = masked_mse(&imputed, item.recording.values(), masked.mask())?;

    // Beat detection on the imputed waveform with the subject template.
    let fs = masked.sample_rate_hz();
    let detected = matched_filter_detect(&imputed, &subject.template, fs)?;
    let pred_peaks = onsets_to_peaks(&detected, &subject.template);
    let tol = (cfg.tolerance_s * fs).round() as usize;
    let (tp, fp, fn_) = match_beats(&pred_peaks, item.truth_beats.onsets(), tol);
    Ok((mse, tp, fp, fn_))
}

/// Evaluates every model over the kind x percentage grid: masks are
/// regenerated deterministically per cell, each model imputes the same masked
/// recordings, beats are re-detected on the imputed signals and all metrics
/// are aggregated per cell. Per-recording failures are recorded on their row
/// and the sweep continues.
pub fn run_sweep(
    models: &[ModelSpec],
    data: &[SweepItem],
    external: &PulseTemplate,
    cfg: &SweepConfig,
) -> Vec<EvalReport> {
    let mut reports = Vec::new();
    for kind in &cfg.kinds {
        for (pct_idx, &pct) in cfg.percentages.iter().enumerate() {
            // Masks for this grid cell, shared across models.
            let cell = (pct_idx as u64) << 8 | matches!(kind, MissingnessKind::Extended) as u64;
            let masked: Vec<Result<Recording>> = data
                .iter()
                .enumerate()
                .map(|(i, item)| {
                    let spec = MissingnessSpec {
                        kind: *kind,
                        percentage: pct,
                        packet_len_samples: cfg.packet_len_samples,
                        seed: rng::subseed(cfg.seed, "sweep.mask", cell << 32 | i as u64),
                    };
                    apply_missingness(&item.recording, &spec)
                })
                .collect();

            for model in models {
                let rows: Vec<EvalRow> = data
                    .iter()
                    .enumerate()
                    .map(|(i, item)| {
                        let outcome = masked[i].as_ref().map_err(|e| e.clone()).and_then(
                            |masked_rec| {
                                let prior_seed =
                                    rng::subseed(cfg.seed, "sweep.prior", cell << 32 | i as u64);
                                evaluate_one(model, item, masked_rec, external, cfg, prior_seed)
                            },
                        );
                        match outcome {
                            Ok((mse, tp, fp, fn_)) => {
                                let (f1, precision, sensitivity) = beat_metrics(tp, fp, fn_);
                                EvalRow {
                                    recording: i,
                                    mse,
                                    tp,
                                    fp,
                                    fn_,
                                    f1,
                                    precision,
                                    sensitivity,
                                    error: None,
                                }
                            }
                            Err(e) => EvalRow {
                                recording: i,
                                mse: 0.0,
                                tp: 0,
                                fp: 0,
                                fn_: 0,
                                f1: 0.0,
                                precision: 0.0,
                                sensitivity: 0.0,
                                error: Some(e.to_string()),
                            },
                        }
                    })
                    .collect();
                reports.push(EvalReport::from_rows(
                    model.label().to_string(),
                    *kind,
                    pct,
                    rows,
                ));
            }
        }
    }
    reports
}
