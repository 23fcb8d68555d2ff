use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spatial_frontend::dereverb::*;
use spatial_frontend::scene::speech_like;
use spatial_frontend::signal::*;

/// Gaussian noise under a random 20 ms envelope: the source model WPE assumes.
fn modulated_noise(secs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (secs * 16_000.0) as usize;
    let mut gain = 1.0;
    (0..n)
        .map(|i| {
            if i % 320 == 0 {
                gain = 10f64.powf(rng.gen_range(-3.0..0.0));
            }
            let v: f64 = StandardNormal.sample(&mut rng);
            gain * v
        })
        .collect()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn echo_inside_prediction_window_is_removed() {
    let cfg = StftPreset::Wideband.config();
    let s = modulated_noise(20.0, 21);
    let lag = 3 * cfg.hop_size;
    let mut y = s.clone();
    for n in lag..s.len() {
        y[n] += 0.5 * s[n - lag];
    }
    let wave = WaveformBuffer::mono(y.clone(), 16_000).unwrap();
    let spec = stft(&wave, &cfg).unwrap();
    // instantaneous variances bias the taps toward zero on a source this
    // peaky; a one-frame context and more iterations let them converge
    let wpe_cfg = WpeConfig { psd_context: 1, iterations: 10, ..WpeConfig::siso() };
    let (out, _) = wpe(&spec, &wpe_cfg).unwrap();
    let out = istft(&out, &cfg).unwrap().channel_vec(0);
    // skip the edges where the STFT has no full overlap
    let range = cfg.fft_size..s.len() - cfg.fft_size;
    let echo_in: Vec<f64> = range.clone().map(|n| y[n] - s[n]).collect();
    let echo_out: Vec<f64> = range.map(|n| out[n] - s[n]).collect();
    let reduction = 10.0 * (energy(&echo_in) / energy(&echo_out)).log10();
    assert!(reduction >= 20.0, "echo reduced by {reduction:.2} dB");
}

#[test]
fn mimo_on_one_channel_equals_siso() {
    let cfg = StftPreset::Wideband.config();
    let wave = WaveformBuffer::mono(speech_like(2.0, 16_000, 3), 16_000).unwrap();
    let spec = stft(&wave, &cfg).unwrap();
    let (a, _) = wpe(&spec, &WpeConfig::mimo()).unwrap();
    let (b, _) = wpe(&spec, &WpeConfig::siso()).unwrap();
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        assert!((x - y).norm() <= 1e-9 * (1.0 + x.norm()));
    }
}

#[test]
fn shape_is_preserved() {
    let cfg = StftPreset::Wideband.config();
    let chans: Vec<Vec<f64>> = (0..3).map(|m| speech_like(1.0, 16_000, 40 + m)).collect();
    let wave = WaveformBuffer::from_channels(&chans, 16_000).unwrap();
    let spec = stft(&wave, &cfg).unwrap();
    for c in [WpeConfig::mimo(), WpeConfig::siso()] {
        let (out, filters) = wpe(&spec, &c).unwrap();
        assert_eq!(out.data.dim(), spec.data.dim());
        assert_eq!(filters.filters.len(), spec.num_bins());
        assert!(out.data.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
    }
}
