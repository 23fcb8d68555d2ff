//! Seeded speech-like test source.
//!
//! Syllable-rate bursts of formant-filtered harmonic excitation (voiced) or
//! high-band noise (unvoiced), separated by pauses. The signal is strongly
//! non-stationary, which is what the dereverberation and channel-selection
//! stages rely on; it is not meant to be intelligible.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floor of continuous noise relative to the active-speech RMS, in dB.
const NOISE_FLOOR_DB: f64 = -45.0;

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn envelope(i: usize, len: usize, fs: f64) -> f64 {
    let attack = (0.02 * fs) as usize;
    let release = (0.04 * fs) as usize;
    if i < attack {
        (0.5 * PI * i as f64 / attack as f64).sin().powi(2)
    } else if i + release > len {
        (0.5 * PI * (len - i) as f64 / release as f64).sin().powi(2)
    } else {
        1.0
    }
}

fn voiced(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let f0_start = rng.gen_range(90.0..220.0);
    let f0_end = f0_start * rng.gen_range(0.8..1.2);
    let formants = [
        (rng.gen_range(300.0..850.0), 90.0),
        (rng.gen_range(850.0..2300.0), 130.0),
        (rng.gen_range(2300.0..3300.0), 200.0),
    ];
    let mut filters: Vec<Resonator> = formants
        .iter()
        .map(|&(f, bw)| Resonator::new(f, bw, fs))
        .collect();
    let mut phase: f64 = 0.0;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / len as f64;
        phase += 2.0 * PI * f0 / fs;
        let harmonics = ((0.45 * fs) / f0) as usize;
        let mut e: f64 = (1..=harmonics).map(|h| (h as f64 * phase).cos() / h as f64).sum();
        let n: f64 = StandardNormal.sample(rng);
        e += 0.1 * n;
        // parallel formant branches, each normalized at its centre frequency
        let y: f64 = filters.iter_mut().map(|f| f.tick(e)).sum();
        out.push(y);
    }
    out
}

fn unvoiced(rng: &mut ChaCha8Rng, len: usize, fs: f64) -> Vec<f64> {
    let centre = rng.gen_range(3000.0..6000.0);
    let mut f = Resonator::new(centre, 1500.0, fs);
    (0..len)
        .map(|_| {
            let n: f64 = StandardNormal.sample(rng);
            f.tick(n)
        })
        .collect()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Speech-like signal of `duration_s` seconds, peak-normalized to 0.5.
pub fn speech_like(duration_s: f64, sample_rate: u32, seed: u64) -> Vec<f64> {
    let fs = sample_rate as f64;
    let n = (duration_s * fs).round() as usize;
    let mut out = vec![0.0; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tail = (0.05 * fs) as usize;
    let mut pos = (rng.gen_range(0.03..0.12) * fs) as usize;
    let mut active = Vec::new();
    loop {
        let len = (rng.gen_range(0.10..0.28) * fs) as usize;
        if pos + len + tail > n {
            break;
        }
        let mut syl = if rng.gen_bool(0.8) {
            voiced(&mut rng, len, fs)
        } else {
            unvoiced(&mut rng, len, fs)
        };
        let level = rng.gen_range(0.3..1.0) / rms(&syl).max(1e-12);
        for (i, s) in syl.iter_mut().enumerate() {
            *s *= level * envelope(i, len, fs);
        }
        out[pos..pos + len].copy_from_slice(&syl);
        active.extend_from_slice(&syl);
        let gap = if rng.gen_bool(0.15) {
            rng.gen_range(0.25..0.45)
        } else {
            rng.gen_range(0.03..0.15)
        };
        pos += len + (gap * fs) as usize;
    }
    let floor = rms(&active).max(1e-3) * 10f64.powf(NOISE_FLOOR_DB / 20.0);
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += floor * z;
    }
    let peak = out.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}
