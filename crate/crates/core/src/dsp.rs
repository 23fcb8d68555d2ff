//! Small FFT helpers shared by the simulator and the metrics.

use num_complex::Complex64;
use realfft::RealFftPlanner;

fn fft_len(n: usize) -> usize {
    n.next_power_of_two().max(2)
}

fn forward(x: &[f64], n: usize, planner: &mut RealFftPlanner<f64>) -> Vec<Complex64> {
    let fft = planner.plan_fft_forward(n);
    let mut input = vec![0.0; n];
    input[..x.len()].copy_from_slice(x);
    let mut out = fft.make_output_vec();
    fft.process(&mut input, &mut out).expect("fft buffer sizes");
    out
}

fn inverse(mut spec: Vec<Complex64>, n: usize, planner: &mut RealFftPlanner<f64>) -> Vec<f64> {
    let ifft = planner.plan_fft_inverse(n);
    spec[0].im = 0.0;
    if let Some(last) = spec.last_mut() {
        last.im = 0.0;
    }
    let mut out = vec![0.0; n];
    ifft.process(&mut spec, &mut out).expect("fft buffer sizes");
    let scale = 1.0 / n as f64;
    out.iter_mut().for_each(|v| *v *= scale);
    out
}

/// Full linear convolution, length `a.len() + b.len() - 1`.
pub fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let n = fft_len(out_len);
    let mut planner = RealFftPlanner::new();
    let fa = forward(a, n, &mut planner);
    let fb = forward(b, n, &mut planner);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = inverse(prod, n, &mut planner);
    out.truncate(out_len);
    out
}

/// `c[k] = sum_n a[n + k] b[n]` for `k` in `0..max_lag` (a lags b).
pub fn cross_correlate(a: &[f64], b: &[f64], max_lag: usize) -> Vec<f64> {
    let n = fft_len(a.len() + b.len() + max_lag);
    let mut planner = RealFftPlanner::new();
    let fa = forward(a, n, &mut planner);
    let fb = forward(b, n, &mut planner);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let out = inverse(prod, n, &mut planner);
    out[..max_lag.min(n)].to_vec()
}

/// Circular-free fractional delay by `delay` samples (positive delays),
/// returned with `extra` samples of headroom appended.
pub fn fractional_delay(x: &[f64], delay: f64, extra: usize) -> Vec<f64> {
    let out_len = x.len() + extra;
    let n = fft_len(out_len + x.len().min(4096));
    let mut planner = RealFftPlanner::new();
    let mut spec = forward(x, n, &mut planner);
    for (k, c) in spec.iter_mut().enumerate() {
        let phase = -2.0 * std::f64::consts::PI * k as f64 * delay / n as f64;
        *c *= Complex64::from_polar(1.0, phase);
    }
    let mut out = inverse(spec, n, &mut planner);
    out.truncate(out_len);
    out
}

/// Ones-sided power spectrum scaling helper: shapes white noise by `gain(k)`.
pub fn shape_spectrum(x: &[f64], gain: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let n = x.len().max(2);
    let mut planner = RealFftPlanner::new();
    let mut spec = forward(x, n, &mut planner);
    let bins = spec.len();
    for (k, c) in spec.iter_mut().enumerate() {
        *c *= gain(k, bins);
    }
    let mut out = inverse(spec, n, &mut planner);
    out.truncate(x.len());
    out
}

pub fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}
