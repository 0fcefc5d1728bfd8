//! Pulse-template extraction: QRS detection, matched filtering and the
//! two-pass subject template.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::beats::BeatSequence;
use crate::error::{Error, Result};
use crate::math;
use crate::signal::{linear_interpolate, Recording};

/// A median beat waveform with its sample rate and the offset from the
/// template start to the nominal QRS peak.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTemplate {
    waveform: Vec<f32>,
    sample_rate_hz: f64,
    pre_peak_offset_samples: usize,
}

impl PulseTemplate {
    pub fn new(
        waveform: Vec<f32>,
        sample_rate_hz: f64,
        pre_peak_offset_samples: usize,
    ) -> Result<Self> {
        if waveform.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "template must have at least 2 samples, got {}",
                waveform.len()
            )));
        }
        if waveform.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "template contains non-finite values".into(),
            ));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidParameter(
                "template sample rate must be positive".into(),
            ));
        }
        Ok(Self {
            waveform,
            sample_rate_hz,
            pre_peak_offset_samples,
        })
    }

    pub fn waveform(&self) -> &[f32] {
        &self.waveform
    }

    pub fn len(&self) -> usize {
        self.waveform.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waveform.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn pre_peak_offset_samples(&self) -> usize {
        self.pre_peak_offset_samples
    }
}

fn ma_centered(x: &[f64], win: usize) -> Vec<f64> {
    if win <= 1 {
        return x.to_vec();
    }
    let n = x.len();
    let half_lo = (win - 1) / 2;
    let half_hi = win / 2;
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(half_lo);
        let hi = (i + half_hi).min(n - 1);
        let sum: f64 = x[lo..=hi].iter().sum();
        out[i] = sum / (hi - lo + 1) as f64;
    }
    out
}

fn max_of(x: &[f64]) -> f64 {
    x.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// QRS detection with the combined adaptive thresholds of Christov's
/// algorithm: a band-limited "complex lead" (moving-average smoothing plus a
/// rectified derivative) is compared against the sum of a steep-slope
/// threshold `M`, an integrating threshold `F` and an expected-beat threshold
/// `R`. Runs over the whole buffer with zero-phase moving averages, so
/// detected indices line up with the R peaks.
///
/// Used to bootstrap the external template from clean, fully observed
/// recordings.
pub fn christov_detect(signal: &[f32], fs: f64) -> Result<Vec<usize>> {
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::InvalidParameter("sample rate must be positive".into()));
    }
    let n = signal.len();
    let warm_up = fs.ceil() as usize;
    if n < warm_up {
        return Err(Error::SignalTooShort {
            needed: warm_up,
            got: n,
        });
    }

    let ms = |seconds: f64| ((seconds * fs).round() as usize).max(1);

    // Complex lead: power-line and EMG moving averages, rectified derivative,
    // then a 40 ms moving average.
    let x: Vec<f64> = signal.iter().map(|&v| v as f64).collect();
    let y1 = ma_centered(&x, ms(1.0 / 50.0));
    let y2 = ma_centered(&y1, ms(0.028));
    let mut deriv = vec![0.0; n];
    for i in 1..n - 1 {
        deriv[i] = (y2[i + 1] - y2[i - 1]).abs();
    }
    let y = ma_centered(&deriv, ms(0.040));

    let ms200 = ms(0.200);
    let ms350 = ms(0.350);
    let ms50 = ms(0.050);
    let one_second = ms(1.0);

    // Steep-slope threshold M: buffer of five values, refreshed 200 ms after
    // each detection, decreasing to 60% of the refreshed value over the next
    // second, then constant.
    let m_init = 0.6 * max_of(&y[..n.min(ms(5.0))]);
    let mut mm = [m_init; 5];
    let mut m_now = m_init;
    let mut m_decrement = m_init * 0.4 / one_second as f64;

    // Integrating threshold F, adjusted every sample after a 350 ms warm-up.
    let mut f_thr = y[..n.min(ms350)].iter().sum::<f64>() / n.min(ms350) as f64;

    // Expected-beat threshold R: zero until two thirds of the expected
    // interval have passed, then decreasing 1.4x faster than M.
    let mut r_thr = 0.0;
    let mut rr_buf: Vec<f64> = Vec::new();

    let mut peaks: Vec<usize> = Vec::new();
    let mut last_cross: Option<usize> = None;
    let mut refractory_max = 0.0f64;

    for i in 0..n {
        match last_cross {
            None => {
                // Initial decay towards 0.6 * m_init over the first second.
                if i > 0 && i <= one_second {
                    m_now -= m_decrement;
                }
            }
            Some(cross) => {
                let since = i - cross;
                if since < ms200 {
                    refractory_max = refractory_max.max(y[i]);
                } else if since == ms200 {
                    let candidate = 0.6 * refractory_max;
                    let prev = mm[4];
                    let new_m5 = if candidate > 1.5 * prev {
                        1.1 * prev
                    } else {
                        candidate
                    };
                    mm = [mm[1], mm[2], mm[3], mm[4], new_m5];
                    m_now = mm.iter().sum::<f64>() / 5.0;
                    m_decrement = m_now * 0.4 / one_second as f64;
                } else if since <= ms200 + one_second {
                    m_now -= m_decrement;
                }
            }
        }

        if i >= ms350 {
            let latest = max_of(&y[i + 1 - ms50..=i]);
            let earliest = max_of(&y[i - ms350..i - ms350 + ms50]);
            f_thr += (latest - earliest) / 150.0;
        }

        if let Some(cross) = last_cross {
            if rr_buf.len() >= 2 {
                let expected = rr_buf.iter().sum::<f64>() / rr_buf.len() as f64;
                if (i - cross) as f64 > expected * 2.0 / 3.0 {
                    r_thr -= 1.4 * m_decrement;
                }
            }
        }

        let in_refractory = matches!(last_cross, Some(c) if i - c < ms200);
        if !in_refractory && y[i] > m_now + f_thr + r_thr {
            // Locate the complex-lead peak, then refine to the largest
            // absolute deflection of the raw signal around it.
            let search_end = (i + ms200).min(n);
            let mut y_peak = i;
            for j in i..search_end {
                if y[j] > y[y_peak] {
                    y_peak = j;
                }
            }
            let lo = y_peak.saturating_sub(ms(0.060));
            let hi = (y_peak + ms(0.060)).min(n - 1);
            let mut r_peak = lo;
            for j in lo..=hi {
                if signal[j].abs() > signal[r_peak].abs() {
                    r_peak = j;
                }
            }
            if peaks.last() != Some(&r_peak) {
                peaks.push(r_peak);
            }

            if let Some(cross) = last_cross {
                rr_buf.push((i - cross) as f64);
                if rr_buf.len() > 5 {
                    rr_buf.remove(0);
                }
            }
            last_cross = Some(i);
            refractory_max = y[i];
            r_thr = 0.0;
        }
    }

    peaks.sort_unstable();
    peaks.dedup();
    Ok(peaks)
}

/// Cross-correlation `c(t) = sum_m x(t + m) h(m)` with the signal
/// zero-extended beyond its end; the output has the signal's length.
pub fn cross_correlate(signal: &[f32], template: &[f32]) -> Result<Vec<f32>> {
    if template.is_empty() {
        return Err(Error::EmptyTemplate);
    }
    if template.len() > signal.len() {
        return Err(Error::SignalTooShort {
            needed: template.len(),
            got: signal.len(),
        });
    }
    let n = signal.len();
    let w = template.len();
    let mut out = vec![0.0f32; n];
    for (t, o) in out.iter_mut().enumerate() {
        let overlap = w.min(n - t);
        let mut acc = 0.0f64;
        for m in 0..overlap {
            acc += signal[t + m] as f64 * template[m] as f64;
        }
        *o = acc as f32;
    }
    Ok(out)
}

/// Matched-filter beat detection: cross-correlate with the template, keep
/// indices at or above the 97th percentile of the correlation, then greedily
/// accept candidates in descending correlation order (ties broken by lower
/// index), rejecting any within 400 ms of an accepted one.
pub fn matched_filter_detect(
    signal: &[f32],
    template: &PulseTemplate,
    fs: f64,
) -> Result<BeatSequence> {
    let c = cross_correlate(signal, template.waveform())?;
    let threshold = math::percentile_f32(&c, 97.0).expect("non-empty correlation") as f32;
    let min_sep = (0.400 * fs).round() as usize;

    let mut candidates: Vec<usize> = (0..c.len()).filter(|&i| c[i] >= threshold).collect();
    candidates.sort_by(|&a, &b| {
        c[b].partial_cmp(&c[a])
            .expect("non-finite correlation")
            .then(a.cmp(&b))
    });

    let mut accepted: Vec<usize> = Vec::new();
    for &i in &candidates {
        let clash = accepted
            .iter()
            .any(|&a| a.abs_diff(i) < min_sep.max(1));
        if !clash {
            accepted.push(i);
        }
    }
    accepted.sort_unstable();
    BeatSequence::from_detected(accepted, signal.len())
}

/// Median beat waveform from windows of length `W` (the median inter-onset
/// gap) starting at each onset. Only observed samples (`mask == 1`) inside
/// the recording contribute; offsets observed in no segment are zero. The
/// pre-peak anchor is the offset of the largest absolute deflection.
pub fn extract_template(
    x_obl: &[f32],
    mask: &[u8],
    beats: &BeatSequence,
    fs: f64,
) -> Result<PulseTemplate> {
    if beats.len() < 2 {
        return Err(Error::TooFewBeats {
            needed: 2,
            got: beats.len(),
        });
    }
    if mask.len() != x_obl.len() {
        return Err(Error::LengthMismatch {
            context: "mask vs signal",
            expected: x_obl.len(),
            got: mask.len(),
        });
    }
    let gaps: Vec<f64> = beats.intervals().iter().map(|&g| g as f64).collect();
    let window = math::median(&gaps).unwrap().round() as usize;
    if window < 2 {
        return Err(Error::InvalidParameter(
            "median inter-onset gap below 2 samples".into(),
        ));
    }

    let len = x_obl.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); window];
    for &onset in beats.onsets() {
        for (j, column) in columns.iter_mut().enumerate() {
            let idx = onset + j;
            if idx < len && mask[idx] == 1 {
                column.push(x_obl[idx] as f64);
            }
        }
    }
    let waveform: Vec<f32> = columns
        .iter()
        .map(|col| math::median(col).unwrap_or(0.0) as f32)
        .collect();

    let mut pre_peak = 0usize;
    for (j, &v) in waveform.iter().enumerate() {
        if v.abs() > waveform[pre_peak].abs() {
            pre_peak = j;
        }
    }
    PulseTemplate::new(waveform, fs, pre_peak)
}

/// Builds the external (population) template from a small set of fully
/// observed recordings: detect R peaks per recording, shift each back by
/// 250 ms (clamped at zero) to include the P wave, split at those onsets,
/// truncate the segments to the median segment length and take the
/// elementwise median.
pub fn build_external_template(recordings: &[Recording]) -> Result<PulseTemplate> {
    if recordings.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least one recording to build the external template".into(),
        ));
    }
    let fs = recordings[0].sample_rate_hz();
    let pre_peak = (0.250 * fs).round() as usize;

    let mut segments: Vec<(usize, usize, usize)> = Vec::new(); // (recording, start, len)
    for (r, rec) in recordings.iter().enumerate() {
        if !rec.is_fully_observed() {
            return Err(Error::NotFullyObserved);
        }
        if (rec.sample_rate_hz() - fs).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "recordings must share a sample rate".into(),
            ));
        }
        let peaks = christov_detect(rec.values(), fs)?;
        let onsets: Vec<usize> = {
            let mut o: Vec<usize> = peaks.iter().map(|&p| p.saturating_sub(pre_peak)).collect();
            o.dedup();
            o
        };
        for (i, &start) in onsets.iter().enumerate() {
            let end = if i + 1 < onsets.len() {
                onsets[i + 1]
            } else {
                rec.len()
            };
            if end > start {
                segments.push((r, start, end - start));
            }
        }
    }
    if segments.is_empty() {
        return Err(Error::NoBeatsDetected);
    }

    let lens: Vec<f64> = segments.iter().map(|&(_, _, l)| l as f64).collect();
    let window = math::median(&lens).unwrap().round() as usize;
    if window < 2 {
        return Err(Error::InvalidParameter(
            "median beat segment below 2 samples".into(),
        ));
    }

    let mut waveform = Vec::with_capacity(window);
    for j in 0..window {
        let mut col: Vec<f64> = Vec::new();
        for &(r, start, len) in &segments {
            if len >= window {
                col.push(recordings[r].values()[start + j] as f64);
            }
        }
        waveform.push(math::median(&col).unwrap_or(0.0) as f32);
    }
    if waveform.iter().all(|&v| v == 0.0) {
        return Err(Error::NoBeatsDetected);
    }
    PulseTemplate::new(waveform, fs, pre_peak.min(window - 1))
}

/// Result of the two-pass subject-template extraction.
#[derive(Debug, Clone)]
pub struct SubjectTemplate {
    pub template: PulseTemplate,
    pub beats: BeatSequence,
    /// True when a matched-filter pass found fewer than two beats and the
    /// external template was returned unchanged.
    pub degraded: bool,
}

/// Two-pass subject template: matched-filter detection with the external
/// template bootstraps an intermediate median waveform, which is then used
/// as the matched filter for a second detection pass and a final median
/// waveform. Falls back to the external template (with the first-pass beats)
/// when either pass yields fewer than two beats.
pub fn two_pass_template(rec: &Recording, external: &PulseTemplate) -> Result<SubjectTemplate> {
    let fs = rec.sample_rate_hz();
    let x_obl = linear_interpolate(rec)?;

    let pass1 = matched_filter_detect(&x_obl, external, fs)?;
    if pass1.len() < 2 {
        return Ok(SubjectTemplate {
            template: external.clone(),
            beats: pass1,
            degraded: true,
        });
    }
    let intermediate = extract_template(&x_obl, rec.mask(), &pass1, fs)?;

    let pass2 = matched_filter_detect(&x_obl, &intermediate, fs)?;
    if pass2.len() < 2 {
        return Ok(SubjectTemplate {
            template: external.clone(),
            beats: pass1,
            degraded: true,
        });
    }
    let template = extract_template(&x_obl, rec.mask(), &pass2, fs)?;
    Ok(SubjectTemplate {
        template,
        beats: pass2,
        degraded: false,
    })
}

/// Peak locations implied by matched-filter onsets: each onset plus the
/// template's pre-peak anchor.
pub fn onsets_to_peaks(beats: &BeatSequence, template: &PulseTemplate) -> Vec<usize> {
    beats
        .onsets()
        .iter()
        .map(|&o| o + template.pre_peak_offset_samples())
        .collect()
}

/// Maximum normalized cross-correlation between two waveforms over all
/// alignments with at least half of the shorter waveform overlapping.
pub fn normalized_cross_correlation(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let min_overlap = (a.len().min(b.len()) / 2).max(2);
    let mut best = f64::NEG_INFINITY;
    let la = a.len() as isize;
    let lb = b.len() as isize;
    for lag in -(lb - min_overlap as isize)..=(la - min_overlap as isize) {
        let start_a = lag.max(0) as usize;
        let start_b = (-lag).max(0) as usize;
        let overlap = (la - lag.max(0)).min(lb + lag.min(0)) as usize;
        if overlap < min_overlap {
            continue;
        }
        let mut dot = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for i in 0..overlap {
            let va = a[start_a + i] as f64;
            let vb = b[start_b + i] as f64;
            dot += va * vb;
            na += va * va;
            nb += vb * vb;
        }
        if na > 0.0 && nb > 0.0 {
            best = best.max(dot / (na.sqrt() * nb.sqrt()));
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}
