//! Weighted prediction error (WPE) dereverberation in the STFT domain.
//!
//! For every frequency bin the late reverberation of frame `t` is predicted
//! from the delayed frames `t - delay ... t - delay - taps + 1` of all
//! channels and subtracted:
//!
//! ```text
//! x[t, m] = y[t, m] - sum_i conj(G[i, m]) * ytilde[t, i]
//! ```
//!
//! `G` and the time-varying source variance `lambda[t]` are estimated by
//! alternating minimization of the weighted prediction-error cost
//! `sum_t (sum_m |x[t, m]|^2 / lambda[t] + M ln lambda[t])`.
//!
//! SISO mode runs the same procedure on each channel alone.

use nalgebra::DMatrix;
use ndarray::Array3;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Spectrogram;

pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WpeMode {
    Siso,
    Mimo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WpeConfig {
    pub mode: WpeMode,
    /// Prediction delay in frames.
    #[serde(default = "WpeConfig::default_delay")]
    pub delay: usize,
    /// Filter taps in frames.
    #[serde(default = "WpeConfig::default_taps")]
    pub taps: usize,
    #[serde(default = "WpeConfig::default_iterations")]
    pub iterations: usize,
    /// Ridge added to the correlation matrix, relative to its mean diagonal.
    #[serde(default = "WpeConfig::default_regularization")]
    pub regularization: f64,
    /// Frames on each side averaged into the variance estimate; 0 uses the
    /// instantaneous power.
    #[serde(default)]
    pub psd_context: usize,
}

impl Default for WpeConfig {
    fn default() -> Self {
        Self::mimo()
    }
}

impl WpeConfig {
    fn default_delay() -> usize {
        3
    }
    fn default_taps() -> usize {
        10
    }
    fn default_iterations() -> usize {
        3
    }
    fn default_regularization() -> f64 {
        1e-6
    }

    pub fn mimo() -> Self {
        Self {
            mode: WpeMode::Mimo,
            delay: Self::default_delay(),
            taps: Self::default_taps(),
            iterations: Self::default_iterations(),
            regularization: Self::default_regularization(),
            psd_context: 0,
        }
    }

    pub fn siso() -> Self {
        Self {
            mode: WpeMode::Siso,
            ..Self::mimo()
        }
    }

    /// Delay of 6 hops (48 ms at 128/16 kHz), close to a 50 ms early/late split.
    pub fn fifty_ms(mode: WpeMode) -> Self {
        Self {
            mode,
            delay: 6,
            ..Self::mimo()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay < 1 {
            return Err(Error::Config("wpe.delay must be >= 1".into()));
        }
        if self.taps < 1 {
            return Err(Error::Config("wpe.taps must be >= 1".into()));
        }
        if self.iterations < 1 {
            return Err(Error::Config("wpe.iterations must be >= 1".into()));
        }
        if !(self.regularization > 0.0 && self.regularization.is_finite()) {
            return Err(Error::Config("wpe.regularization must be > 0".into()));
        }
        Ok(())
    }
}

/// Estimated prediction filters and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct WpeFilters {
    /// One `(channels * taps) × channels` matrix per bin. Row `k * M + m'`
    /// holds the tap at delay `delay + k` from input channel `m'`. SISO
    /// filters are block diagonal.
    pub filters: Vec<DMatrix<Complex64>>,
    /// Final variance estimates, groups × frames × bins (1 group for MIMO,
    /// one per channel for SISO).
    pub variances: Array3<f64>,
    /// Weighted prediction-error cost summed over bins: entry 0 is the
    /// unprocessed input, entry `i` follows iteration `i`.
    pub objective: Vec<f64>,
    pub config: WpeConfig,
    pub num_channels: usize,
}

struct BinEstimate {
    filter: DMatrix<Complex64>,
    lambda: Vec<f64>,
    objective: Vec<f64>,
}

/// Stacked delayed observations, frames × (taps * channels), zero history.
fn delayed_stack(y: &[Complex64], frames: usize, chans: usize, delay: usize, taps: usize) -> Vec<Complex64> {
    let width = taps * chans;
    let mut out = vec![Complex64::new(0.0, 0.0); frames * width];
    for t in 0..frames {
        for k in 0..taps {
            let lag = delay + k;
            if t < lag {
                break;
            }
            let src = (t - lag) * chans;
            let dst = t * width + k * chans;
            out[dst..dst + chans].copy_from_slice(&y[src..src + chans]);
        }
    }
    out
}

fn cost(x: &[Complex64], lambda: &[f64], chans: usize) -> f64 {
    lambda
        .iter()
        .enumerate()
        .map(|(t, &l)| {
            let p: f64 = x[t * chans..(t + 1) * chans].iter().map(|c| c.norm_sqr()).sum();
            p / l + chans as f64 * l.ln()
        })
        .sum()
}

fn variances(x: &[Complex64], frames: usize, chans: usize, context: usize) -> Vec<f64> {
    let power: Vec<f64> = (0..frames)
        .map(|t| x[t * chans..(t + 1) * chans].iter().map(|c| c.norm_sqr()).sum::<f64>() / chans as f64)
        .collect();
    (0..frames)
        .map(|t| {
            let lo = t.saturating_sub(context);
            let hi = (t + context + 1).min(frames);
            let mean = power[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            mean.max(VARIANCE_FLOOR)
        })
        .collect()
}

/// `x = y - ytilde X` where `X = conj(G)`.
fn subtract_prediction(
    y: &[Complex64],
    stack: &[Complex64],
    x_mat: &DMatrix<Complex64>,
    frames: usize,
    chans: usize,
) -> Vec<Complex64> {
    let width = x_mat.nrows();
    let mut out = y.to_vec();
    for t in 0..frames {
        let row = &stack[t * width..(t + 1) * width];
        for m in 0..chans {
            let mut acc = Complex64::new(0.0, 0.0);
            for (i, s) in row.iter().enumerate() {
                acc += s * x_mat[(i, m)];
            }
            out[t * chans + m] -= acc;
        }
    }
    out
}

/// Alternating estimation for one bin; `y` is frames × chans, row-major.
fn estimate_bin(
    y: &[Complex64],
    frames: usize,
    chans: usize,
    cfg: &WpeConfig,
    bin: usize,
) -> Result<BinEstimate> {
    let width = cfg.taps * chans;
    let stack = delayed_stack(y, frames, chans, cfg.delay, cfg.taps);
    let mut x = y.to_vec();
    let mut x_mat = DMatrix::<Complex64>::zeros(width, chans);
    let mut lambda = vec![1.0; frames];
    let mut objective = Vec::with_capacity(cfg.iterations + 1);

    for it in 0..cfg.iterations {
        lambda = variances(&x, frames, chans, cfg.psd_context);
        if it == 0 {
            objective.push(cost(y, &lambda, chans));
        }
        // Hermitian accumulation, upper triangle only:
        // corr = sum_t conj(s_t) s_t^T / lambda_t, cross = sum_t conj(s_t) y_t^T / lambda_t
        let mut corr = vec![Complex64::new(0.0, 0.0); width * width];
        let mut cross = vec![Complex64::new(0.0, 0.0); width * chans];
        for t in 0..frames {
            let w = 1.0 / lambda[t];
            let s = &stack[t * width..(t + 1) * width];
            let yt = &y[t * chans..(t + 1) * chans];
            for i in 0..width {
                let ci = s[i].conj() * w;
                if ci.re == 0.0 && ci.im == 0.0 {
                    continue;
                }
                let row = &mut corr[i * width..(i + 1) * width];
                for j in i..width {
                    row[j] += ci * s[j];
                }
                let crow = &mut cross[i * chans..(i + 1) * chans];
                for m in 0..chans {
                    crow[m] += ci * yt[m];
                }
            }
        }
        let trace: f64 = (0..width).map(|i| corr[i * width + i].re).sum();
        if trace > 0.0 {
            let ridge = cfg.regularization * trace / width as f64;
            let a = DMatrix::from_fn(width, width, |i, j| {
                if i == j {
                    Complex64::new(corr[i * width + i].re + ridge, 0.0)
                } else if i < j {
                    corr[i * width + j]
                } else {
                    corr[j * width + i].conj()
                }
            });
            let b = DMatrix::from_fn(width, chans, |i, m| cross[i * chans + m]);
            let chol = a.cholesky().ok_or(Error::SingularBin { bin })?;
            x_mat = chol.solve(&b);
            if x_mat.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::SingularBin { bin });
            }
        } else {
            x_mat.fill(Complex64::new(0.0, 0.0));
        }
        x = subtract_prediction(y, &stack, &x_mat, frames, chans);
        objective.push(cost(&x, &lambda, chans));
    }
    Ok(BinEstimate {
        filter: x_mat.map(|c| c.conj()),
        lambda,
        objective,
    })
}

fn bin_matrix(spec: &Spectrogram, bin: usize, channels: &[usize]) -> Vec<Complex64> {
    let frames = spec.num_frames();
    let mut y = Vec::with_capacity(frames * channels.len());
    for t in 0..frames {
        for &m in channels {
            y.push(spec.data[[t, m, bin]]);
        }
    }
    y
}

fn check_frames(spec: &Spectrogram, cfg: &WpeConfig) -> Result<()> {
    let needed = cfg.delay + cfg.taps + 1;
    if spec.num_frames() < needed {
        return Err(Error::TooShort {
            len: spec.num_frames(),
            needed,
        });
    }
    Ok(())
}

pub fn estimate_wpe_filters(spec: &Spectrogram, cfg: &WpeConfig) -> Result<WpeFilters> {
    cfg.validate()?;
    check_frames(spec, cfg)?;
    let (frames, chans, bins) = spec.data.dim();
    let groups: Vec<Vec<usize>> = match cfg.mode {
        WpeMode::Mimo => vec![(0..chans).collect()],
        WpeMode::Siso => (0..chans).map(|m| vec![m]).collect(),
    };

    // bins are independent; collect keeps results in bin order
    let per_bin: Vec<Vec<BinEstimate>> = (0..bins)
        .into_par_iter()
        .map(|bin| {
            groups
                .iter()
                .map(|g| estimate_bin(&bin_matrix(spec, bin, g), frames, g.len(), cfg, bin))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let width = cfg.taps * chans;
    let mut filters = Vec::with_capacity(bins);
    let mut variances = Array3::zeros((groups.len(), frames, bins));
    let mut objective = vec![0.0; cfg.iterations + 1];
    for (bin, estimates) in per_bin.into_iter().enumerate() {
        let mut g_full = DMatrix::<Complex64>::zeros(width, chans);
        for (gi, (group, est)) in groups.iter().zip(estimates).enumerate() {
            // scatter the group filter into the full stacked layout
            let gc = group.len();
            for k in 0..cfg.taps {
                for (a, &src) in group.iter().enumerate() {
                    for (b, &dst) in group.iter().enumerate() {
                        g_full[(k * chans + src, dst)] = est.filter[(k * gc + a, b)];
                    }
                }
            }
            for (t, l) in est.lambda.iter().enumerate() {
                variances[[gi, t, bin]] = *l;
            }
            for (acc, v) in objective.iter_mut().zip(&est.objective) {
                *acc += v;
            }
        }
        filters.push(g_full);
    }
    Ok(WpeFilters {
        filters,
        variances,
        objective,
        config: *cfg,
        num_channels: chans,
    })
}

/// Subtracts the predicted tail; frames without full history use zeros.
pub fn apply_wpe(spec: &Spectrogram, filters: &WpeFilters, cfg: &WpeConfig) -> Result<Spectrogram> {
    let (frames, chans, bins) = spec.data.dim();
    if filters.config.delay != cfg.delay || filters.config.taps != cfg.taps {
        return Err(Error::Shape(format!(
            "filters estimated with delay {} / taps {}, config has {} / {}",
            filters.config.delay, filters.config.taps, cfg.delay, cfg.taps
        )));
    }
    if filters.filters.len() != bins {
        return Err(Error::Shape(format!(
            "filters cover {} bins, spectrogram has {bins}",
            filters.filters.len()
        )));
    }
    let width = cfg.taps * chans;
    if filters.num_channels != chans
        || filters
            .filters
            .iter()
            .any(|g| g.nrows() != width || g.ncols() != chans)
    {
        return Err(Error::Shape(format!(
            "filters expect {} channels, spectrogram has {chans}",
            filters.num_channels
        )));
    }
    let all: Vec<usize> = (0..chans).collect();
    let planes: Vec<Vec<Complex64>> = (0..bins)
        .into_par_iter()
        .map(|bin| {
            let y = bin_matrix(spec, bin, &all);
            let stack = delayed_stack(&y, frames, chans, cfg.delay, cfg.taps);
            let x_mat = filters.filters[bin].map(|c| c.conj());
            subtract_prediction(&y, &stack, &x_mat, frames, chans)
        })
        .collect();
    let mut out = Array3::zeros((frames, chans, bins));
    for (bin, plane) in planes.iter().enumerate() {
        for t in 0..frames {
            for m in 0..chans {
                out[[t, m, bin]] = plane[t * chans + m];
            }
        }
    }
    Ok(spec.with_data(out))
}

/// Estimate and apply in one go.
pub fn wpe(spec: &Spectrogram, cfg: &WpeConfig) -> Result<(Spectrogram, WpeFilters)> {
    let filters = estimate_wpe_filters(spec, cfg)?;
    let out = apply_wpe(spec, &filters, cfg)?;
    Ok((out, filters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{StftConfig, WindowKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(frames: usize, chans: usize, bins: usize, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((frames, chans, bins), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let cfg = StftConfig::new(2 * (bins - 1), (bins - 1) / 2, WindowKind::SqrtHann);
        Spectrogram::new(data, 16_000, cfg, 0).unwrap()
    }

    #[test]
    fn config_validation() {
        WpeConfig::default().validate().unwrap();
        for bad in [
            WpeConfig { delay: 0, ..WpeConfig::mimo() },
            WpeConfig { taps: 0, ..WpeConfig::mimo() },
            WpeConfig { iterations: 0, ..WpeConfig::mimo() },
            WpeConfig { regularization: 0.0, ..WpeConfig::mimo() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn too_few_frames() {
        let spec = random_spec(13, 2, 5, 1);
        let err = estimate_wpe_filters(&spec, &WpeConfig::mimo()).unwrap_err();
        assert!(matches!(err, Error::TooShort { len: 13, needed: 14 }));
        estimate_wpe_filters(&random_spec(14, 2, 5, 1), &WpeConfig::mimo()).unwrap();
    }

    #[test]
    fn zero_filters_pass_through() {
        let spec = random_spec(40, 3, 9, 2);
        let cfg = WpeConfig::mimo();
        let filters = WpeFilters {
            filters: vec![DMatrix::zeros(cfg.taps * 3, 3); 9],
            variances: Array3::ones((1, 40, 9)),
            objective: vec![],
            config: cfg,
            num_channels: 3,
        };
        let out = apply_wpe(&spec, &filters, &cfg).unwrap();
        assert_eq!(out.data, spec.data);
    }

    #[test]
    fn one_tap_filter_matches_formula() {
        let spec = random_spec(30, 1, 5, 3);
        let cfg = WpeConfig {
            delay: 1,
            taps: 1,
            ..WpeConfig::siso()
        };
        let g = Complex64::new(0.3, -0.7);
        let mut filters = vec![DMatrix::zeros(1, 1); 5];
        filters[2][(0, 0)] = g;
        let wf = WpeFilters {
            filters,
            variances: Array3::ones((1, 30, 5)),
            objective: vec![],
            config: cfg,
            num_channels: 1,
        };
        let out = apply_wpe(&spec, &wf, &cfg).unwrap();
        for t in 0..30 {
            let prev = if t >= 1 { spec.data[[t - 1, 0, 2]] } else { Complex64::new(0.0, 0.0) };
            let expected = spec.data[[t, 0, 2]] - g.conj() * prev;
            assert!((out.data[[t, 0, 2]] - expected).norm() < 1e-15);
            assert_eq!(out.data[[t, 0, 1]], spec.data[[t, 0, 1]]);
        }
    }

    #[test]
    fn apply_is_linear() {
        let spec = random_spec(60, 2, 7, 4);
        let cfg = WpeConfig::mimo();
        let filters = estimate_wpe_filters(&spec, &cfg).unwrap();
        let alpha = Complex64::new(-1.7, 0.4);
        let scaled = spec.with_data(spec.data.mapv(|c| c * alpha));
        let a = apply_wpe(&scaled, &filters, &cfg).unwrap();
        let b = apply_wpe(&spec, &filters, &cfg).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y * alpha).norm() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let spec = random_spec(60, 2, 7, 5);
        let cfg = WpeConfig::mimo();
        let filters = estimate_wpe_filters(&spec, &cfg).unwrap();
        let other = random_spec(60, 3, 7, 5);
        assert!(matches!(apply_wpe(&other, &filters, &cfg), Err(Error::Shape(_))));
        let fewer_bins = random_spec(60, 2, 5, 5);
        assert!(matches!(apply_wpe(&fewer_bins, &filters, &cfg), Err(Error::Shape(_))));
        let other_cfg = WpeConfig { taps: 4, ..cfg };
        assert!(apply_wpe(&spec, &filters, &other_cfg).is_err());
    }

    #[test]
    fn zero_input_gives_zero_filters() {
        let mut spec = random_spec(40, 2, 5, 6);
        spec.data.fill(Complex64::new(0.0, 0.0));
        let (out, filters) = wpe(&spec, &WpeConfig::mimo()).unwrap();
        assert!(filters.filters.iter().all(|g| g.iter().all(|c| c.norm() == 0.0)));
        assert!(out.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn siso_and_mimo_agree_on_one_channel() {
        let spec = random_spec(80, 1, 9, 7);
        let (a, _) = wpe(&spec, &WpeConfig::mimo()).unwrap();
        let (b, _) = wpe(&spec, &WpeConfig::siso()).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).norm() <= 1e-9);
        }
    }

    #[test]
    fn objective_non_increasing_on_random_input() {
        let spec = random_spec(400, 3, 9, 8);
        let cfg = WpeConfig {
            iterations: 5,
            ..WpeConfig::mimo()
        };
        let f = estimate_wpe_filters(&spec, &cfg).unwrap();
        assert_eq!(f.objective.len(), 6);
        for w in f.objective.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
        }
    }

    #[test]
    fn deterministic() {
        let spec = random_spec(60, 2, 7, 9);
        let a = estimate_wpe_filters(&spec, &WpeConfig::mimo()).unwrap();
        let b = estimate_wpe_filters(&spec, &WpeConfig::mimo()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_context_is_a_clipped_moving_average() {
        let x: Vec<Complex64> = [1.0, 3.0, 0.0, 2.0].iter().map(|&v: &f64| Complex64::new(v.sqrt(), 0.0)).collect();
        let v0 = variances(&x, 4, 1, 0);
        assert_eq!(v0[0], 1.0);
        assert_eq!(v0[2], VARIANCE_FLOOR);
        let v1 = variances(&x, 4, 1, 1);
        let expected = [2.0, 4.0 / 3.0, 5.0 / 3.0, 1.0];
        for (a, b) in v1.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_without_context_field_parses() {
        let cfg: WpeConfig = serde_json::from_str(&serde_json::to_string(&WpeConfig::mimo()).unwrap().replace(",\"psd_context\":0", "")).unwrap();
        assert_eq!(cfg, WpeConfig::mimo());
    }
}
