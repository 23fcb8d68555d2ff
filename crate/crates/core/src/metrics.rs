//! Intrusive reverberation and enhancement metrics.

use serde::{Deserialize, Serialize};

use crate::dsp;
use crate::error::{Error, Result};
use crate::scene::Rir;
use crate::signal::WaveformBuffer;

/// Reported dB values are clamped to `[-METRIC_CAP_DB, METRIC_CAP_DB]`.
pub const METRIC_CAP_DB: f64 = 80.0;
/// Early/late split point after the direct path.
pub const EARLY_WINDOW_S: f64 = 0.05;
/// Default integer-lag search range for reference alignment, in samples.
pub const DEFAULT_MAX_LAG: usize = 256;
/// Fractional alignment resolution (sub-sample steps per sample).
const FRACTION_STEPS: i32 = 16;
/// Half-width of the window counted as direct sound in the DRR.
const DIRECT_HALF_WIDTH_S: f64 = 0.0025;
/// Levinson recursion is declared ill-conditioned beyond this estimate.
const MAX_CONDITION: f64 = 1e12;

fn capped_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 {
        return METRIC_CAP_DB;
    }
    if num <= 0.0 {
        return -METRIC_CAP_DB;
    }
    dsp::db(num / den).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
}

fn argmax_abs(h: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in h.iter().enumerate() {
        if v.abs() > h[best].abs() {
            best = i;
        }
    }
    best
}

fn early_len(sample_rate: u32) -> usize {
    (EARLY_WINDOW_S * sample_rate as f64).round() as usize
}

/// C50 of one impulse response with an explicit direct-path index.
pub fn c50(h: &[f64], direct: usize, sample_rate: u32) -> Result<f64> {
    let split = direct + early_len(sample_rate);
    if h.len() <= split {
        return Err(Error::TooShort {
            len: h.len(),
            needed: split + 1,
        });
    }
    if h.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("all-zero impulse response".into()));
    }
    let early = dsp::energy(&h[..=split]);
    let late = dsp::energy(&h[split + 1..]);
    Ok(capped_db(early, late))
}

/// C50 with the direct path taken at `argmax |h|`.
pub fn c50_auto(h: &[f64], sample_rate: u32) -> Result<f64> {
    c50(h, argmax_abs(h), sample_rate)
}

pub fn c50_from_rir(rir: &Rir) -> Result<Vec<f64>> {
    (0..rir.num_channels())
        .map(|m| c50(&rir.channel(m), rir.direct_indices[m], rir.sample_rate))
        .collect()
}

/// Direct-to-reverberant ratio per channel, direct = ±2.5 ms around the peak.
pub fn drr_from_rir(rir: &Rir) -> Vec<f64> {
    let half = (DIRECT_HALF_WIDTH_S * rir.sample_rate as f64).round() as usize;
    (0..rir.num_channels())
        .map(|m| {
            let h = rir.channel(m);
            let d = rir.direct_indices[m];
            let lo = d.saturating_sub(half);
            let hi = (d + half + 1).min(h.len());
            let direct = dsp::energy(&h[lo..hi]);
            capped_db(direct, dsp::energy(&h) - direct)
        })
        .collect()
}

/// RIR of channel `m` truncated 50 ms after its direct path.
pub fn early_rir(rir: &Rir, m: usize) -> Vec<f64> {
    let end = (rir.direct_indices[m] + early_len(rir.sample_rate) + 1).min(rir.len());
    rir.channel(m)[..end].to_vec()
}

/// Mean of all channels' early RIRs, each time-aligned to channel 0's
/// direct path. This is the early component that is coherent across the
/// array, i.e. the target of a dereverberate-then-steer chain.
pub fn array_early_rir(rir: &Rir) -> Vec<f64> {
    let m_count = rir.num_channels();
    let base = rir.direct_delays[0];
    let extra = 64;
    let mut acc: Vec<f64> = Vec::new();
    for m in 0..m_count {
        let h = early_rir(rir, m);
        let shift = base - rir.direct_delays[m];
        // bring everything forward by a fixed pad so the shift is non-negative
        let pad = extra as f64 / 2.0;
        let aligned = dsp::fractional_delay(&h, shift + pad, extra);
        if acc.len() < aligned.len() {
            acc.resize(aligned.len(), 0.0);
        }
        for (a, v) in acc.iter_mut().zip(&aligned) {
            *a += v / m_count as f64;
        }
    }
    acc.drain(..extra / 2);
    acc
}

/// Early reference signal: `clean * h_early`.
pub fn early_reference(clean: &[f64], early: &[f64]) -> Vec<f64> {
    dsp::convolve(clean, early)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedScore {
    pub snr_db: f64,
    /// Delay applied to the reference, in samples (may be fractional).
    pub lag: f64,
    /// Optimal reference gain.
    pub gain: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn score_pair(p: &[f64], r: &[f64]) -> (f64, f64) {
    let n = p.len().max(r.len());
    let rr = dsp::energy(r);
    let pr = dot(p, r);
    let alpha = pr / rr;
    let mut err = 0.0;
    for i in 0..n {
        let pv = p.get(i).copied().unwrap_or(0.0);
        let rv = r.get(i).copied().unwrap_or(0.0);
        err += (pv - alpha * rv).powi(2);
    }
    (capped_db(alpha * alpha * rr, err), alpha)
}

/// SNR of `processed` against `reference` after optimal delay and gain.
///
/// `SNR = 10 log10(|a r|^2 / |p - a r|^2)` with `a` the least-squares
/// gain, searched over integer lags within `max_lag` and refined on a
/// 1/16-sample grid. Invariant to the global gain of `processed`.
pub fn aligned_snr(processed: &[f64], reference: &[f64], max_lag: usize) -> Result<AlignedScore> {
    if reference.iter().all(|v| *v == 0.0) {
        return Err(Error::Degenerate("zero early reference".into()));
    }
    if processed.is_empty() {
        return Err(Error::Degenerate("empty processed signal".into()));
    }
    let fwd = dsp::cross_correlate(processed, reference, max_lag + 1);
    let back = dsp::cross_correlate(reference, processed, max_lag + 1);
    let mut best_lag: i64 = 0;
    let mut best = fwd[0].abs();
    for k in 1..=max_lag {
        if fwd[k].abs() > best {
            best = fwd[k].abs();
            best_lag = k as i64;
        }
        if back[k].abs() > best {
            best = back[k].abs();
            best_lag = -(k as i64);
        }
    }

    let pad = max_lag + 2;
    let mut p = vec![0.0; pad];
    p.extend_from_slice(processed);
    let mut result: Option<AlignedScore> = None;
    for step in -FRACTION_STEPS / 2..=FRACTION_STEPS / 2 {
        let lag = best_lag as f64 + step as f64 / FRACTION_STEPS as f64;
        let r = dsp::fractional_delay(reference, pad as f64 + lag, 2 * pad);
        let (snr_db, gain) = score_pair(&p, &r);
        if result.map_or(true, |b| snr_db > b.snr_db) {
            result = Some(AlignedScore { snr_db, lag, gain });
        }
    }
    Ok(result.expect("non-empty search grid"))
}

/// Early-reference SNR of a mono `processed` signal against channel `m`'s
/// early reference.
pub fn early_reference_snr(
    processed: &WaveformBuffer,
    clean: &WaveformBuffer,
    rir: &Rir,
    m: usize,
) -> Result<f64> {
    check_mono_pair(processed, clean)?;
    if m >= rir.num_channels() {
        return Err(Error::Shape(format!(
            "reference channel {m} out of range for {} channels",
            rir.num_channels()
        )));
    }
    let reference = early_reference(&clean.channel_vec(0), &early_rir(rir, m));
    Ok(aligned_snr(&processed.channel_vec(0), &reference, DEFAULT_MAX_LAG)?.snr_db)
}

/// Early-reference SNR against the array-coherent early reference.
pub fn array_early_reference_snr(
    processed: &WaveformBuffer,
    clean: &WaveformBuffer,
    rir: &Rir,
) -> Result<f64> {
    check_mono_pair(processed, clean)?;
    let reference = early_reference(&clean.channel_vec(0), &array_early_rir(rir));
    Ok(aligned_snr(&processed.channel_vec(0), &reference, DEFAULT_MAX_LAG)?.snr_db)
}

fn check_mono_pair(processed: &WaveformBuffer, clean: &WaveformBuffer) -> Result<()> {
    if processed.num_channels() != 1 || clean.num_channels() != 1 {
        return Err(Error::Shape("processed and clean must both be mono".into()));
    }
    if processed.sample_rate() != clean.sample_rate() {
        return Err(Error::Config("sample rate mismatch".into()));
    }
    Ok(())
}

/// Solve the symmetric Toeplitz system `T(r) x = b` by Levinson recursion.
///
/// Returns the solution and the condition estimate `r[0] / e_final`, where
/// `e_final` is the final forward prediction error.
pub fn levinson_solve(r: &[f64], b: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    if r.len() < n || n == 0 {
        return Err(Error::Shape("toeplitz column shorter than rhs".into()));
    }
    if !(r[0] > 0.0) {
        return Err(Error::IllConditioned { cond: f64::INFINITY });
    }
    let mut a = vec![0.0; n];
    let mut a_prev = vec![0.0; n];
    let mut x = vec![0.0; n];
    a[0] = 1.0;
    let mut err = r[0];
    x[0] = b[0] / r[0];
    for k in 1..n {
        // extend the solution with the current predictor (size k)
        let mut lambda = 0.0;
        for j in 0..k {
            lambda += a[j] * r[k - j];
        }
        let refl = -lambda / err;
        a_prev[..=k].copy_from_slice(&a[..=k]);
        for j in 0..=k {
            a[j] = a_prev[j] + refl * a_prev[k - j];
        }
        err *= 1.0 - refl * refl;
        if !(err > r[0] / MAX_CONDITION) {
            return Err(Error::IllConditioned {
                cond: r[0] / err.max(f64::MIN_POSITIVE),
            });
        }
        let mut delta = b[k];
        for j in 0..k {
            delta -= x[j] * r[k - j];
        }
        let mu = delta / err;
        // `a` reversed is the backward predictor
        for j in 0..=k {
            x[j] += mu * a[k - j];
        }
    }
    Ok((x, r[0] / err))
}

/// Least-squares FIR estimate `h` (length `taps`) with `processed ≈ clean * h`.
///
/// Uses the autocorrelation (Toeplitz) normal equations; exact when
/// `processed` is the full linear convolution of `clean` with `h`.
pub fn identify_channel(processed: &[f64], clean: &[f64], taps: usize) -> Result<Vec<f64>> {
    if taps == 0 || taps > clean.len() / 4 {
        return Err(Error::Config(format!(
            "identification length {taps} must be in 1..={}",
            clean.len() / 4
        )));
    }
    let r = dsp::cross_correlate(clean, clean, taps);
    let p = dsp::cross_correlate(processed, clean, taps);
    Ok(levinson_solve(&r, &p)?.0)
}

/// Effective C50 of a processing chain, measured from its identified response.
pub fn effective_c50(processed: &[f64], clean: &[f64], taps: usize, sample_rate: u32) -> Result<f64> {
    let h = identify_channel(processed, clean, taps)?;
    c50_auto(&h, sample_rate)
}

pub fn localization_error(estimate_deg: f64, oracle_deg: f64) -> f64 {
    (estimate_deg - oracle_deg).abs()
}

pub fn mean_localization_error(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|&(e, o)| localization_error(e, o)).sum::<f64>() / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub c50_db: Vec<f64>,
    pub drr_db: Vec<f64>,
    pub early_reference_snr_db: Option<f64>,
    pub effective_c50_db: Option<f64>,
    pub localization_error_deg: Option<f64>,
    pub ambient_snr_db: Vec<Option<f64>>,
    pub white_snr_db: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str =
        "name,mean_c50_db,mean_drr_db,early_reference_snr_db,effective_c50_db,localization_error_deg";

    /// One CSV row summarising the report; absent values are left empty.
    pub fn csv_row(&self, name: &str) -> String {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                String::new()
            } else {
                format!("{}", v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            name,
            mean(&self.c50_db),
            mean(&self.drr_db),
            opt(self.early_reference_snr_db),
            opt(self.effective_c50_db),
            opt(self.localization_error_deg)
        )
    }
}

pub fn reports_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from(MetricReport::CSV_HEADER);
    out.push('\n');
    for (name, r) in rows {
        out.push_str(&r.csv_row(name));
        out.push('\n');
    }
    out
}
