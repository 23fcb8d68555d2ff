//! Synthetic reverberant multichannel scenes.
//!
//! Room impulse responses are a fractional-delay direct path (1/r
//! attenuation, far-field plane-wave inter-mic delays) followed by an
//! exponentially decaying Gaussian tail, independent across channels. The
//! tail energy relative to the direct path follows the diffuse-field
//! critical-distance relation `(r / r_c)^2` with `r_c = 0.057 sqrt(V / T60)`.

mod source;

pub use source::speech_like;

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::beamform::ArrayGeometry;
use crate::dsp;
use crate::error::{Error, Result};
use crate::signal::WaveformBuffer;

/// Half-length of the windowed-sinc fractional delay kernel (64 taps total).
const KERNEL_HALF: i64 = 32;
/// Gap between the direct path and the onset of the diffuse tail.
const TAIL_ONSET_S: f64 = 0.0025;
/// Tail samples are kept below this fraction of the direct-path peak.
const TAIL_PEAK_RATIO: f64 = 0.9;
/// Correlation of the ambient noise across channels.
const AMBIENT_COHERENCE: f64 = 0.5;

const STREAM_RIR: u64 = 1;
const STREAM_AMBIENT: u64 = 2;
const STREAM_WHITE: u64 = 3;
const STREAM_GAIN: u64 = 4;

fn default_room_volume() -> f64 {
    60.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomScene {
    pub azimuth_deg: f64,
    pub range_m: f64,
    pub t60_s: f64,
    /// Ambient (pink) noise SNR against the reverberant speech; `null` disables it.
    pub ambient_snr_db: Option<f64>,
    /// Sensor self-noise SNR; `null` disables it.
    pub white_snr_db: Option<f64>,
    /// Per-channel gain drawn uniformly from this dB interval.
    pub gain_jitter_db: [f64; 2],
    /// Peak level of the rendered mixture.
    pub output_dbfs: f64,
    pub seed: u64,
    #[serde(default = "default_room_volume")]
    pub room_volume_m3: f64,
}

impl RoomScene {
    /// A clean anechoic-capable scene with every augmentation disabled.
    pub fn dry(azimuth_deg: f64, range_m: f64, seed: u64) -> Self {
        Self {
            azimuth_deg,
            range_m,
            t60_s: 0.0,
            ambient_snr_db: None,
            white_snr_db: None,
            gain_jitter_db: [0.0, 0.0],
            output_dbfs: 0.0,
            seed,
            room_volume_m3: default_room_volume(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=180.0).contains(&self.azimuth_deg) {
            return Err(Error::Config(format!(
                "azimuth {} outside [0, 180]",
                self.azimuth_deg
            )));
        }
        if !(self.range_m > 0.0 && self.range_m.is_finite()) {
            return Err(Error::Config(format!("range {} must be > 0", self.range_m)));
        }
        if !(self.t60_s >= 0.0 && self.t60_s.is_finite()) {
            return Err(Error::Config(format!("t60 {} must be >= 0", self.t60_s)));
        }
        if !(self.gain_jitter_db[0] <= self.gain_jitter_db[1]) {
            return Err(Error::Config("gain_jitter_db must be [low, high]".into()));
        }
        if !(self.room_volume_m3 > 0.0) {
            return Err(Error::Config("room volume must be > 0".into()));
        }
        for snr in [self.ambient_snr_db, self.white_snr_db].into_iter().flatten() {
            if !snr.is_finite() {
                return Err(Error::Config("SNRs must be finite or null".into()));
            }
        }
        if !self.output_dbfs.is_finite() {
            return Err(Error::Config("output_dbfs must be finite".into()));
        }
        Ok(())
    }

    /// Diffuse-to-direct energy ratio implied by the room model.
    pub fn reverb_to_direct_ratio(&self) -> f64 {
        if self.t60_s == 0.0 {
            return 0.0;
        }
        let critical = 0.057 * (self.room_volume_m3 / self.t60_s).sqrt();
        (self.range_m / critical).powi(2)
    }
}

/// Multichannel room impulse response with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    /// Channels × taps.
    pub taps: Array2<f64>,
    pub sample_rate: u32,
    /// Per-channel argmax of |h|.
    pub direct_indices: Vec<usize>,
    /// Exact (fractional) direct-path delay per channel, in samples.
    pub direct_delays: Vec<f64>,
    pub scene: RoomScene,
    pub geometry: ArrayGeometry,
}

impl Rir {
    pub fn num_channels(&self) -> usize {
        self.taps.nrows()
    }

    pub fn len(&self) -> usize {
        self.taps.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.ncols() == 0
    }

    pub fn channel(&self, m: usize) -> Vec<f64> {
        self.taps.row(m).to_vec()
    }
}

fn hann_sinc(x: f64) -> f64 {
    let half = KERNEL_HALF as f64;
    if x.abs() >= half {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (PI * x / half).cos());
    let s = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
    s * window
}

pub fn generate_rir(scene: &RoomScene, geom: &ArrayGeometry, sample_rate: u32) -> Result<Rir> {
    scene.validate()?;
    geom.validate()?;
    let fs = sample_rate as f64;
    let m_count = geom.num_mics;
    let delays: Vec<f64> = (0..m_count)
        .map(|m| {
            (scene.range_m / geom.speed_of_sound + geom.relative_delay(m, scene.azimuth_deg)) * fs
        })
        .collect();
    let max_delay = delays.iter().cloned().fold(0.0, f64::max);
    let decay_len = (scene.t60_s * 1.2).max(0.06);
    let len = max_delay.ceil() as usize + KERNEL_HALF as usize + (decay_len * fs).ceil() as usize;

    let amplitude = 1.0 / scene.range_m;
    let mut taps = Array2::<f64>::zeros((m_count, len));
    for (m, &d) in delays.iter().enumerate() {
        let base = d.floor() as i64;
        for n in (base - KERNEL_HALF + 1)..=(base + KERNEL_HALF) {
            if n >= 0 && (n as usize) < len {
                taps[[m, n as usize]] += amplitude * hann_sinc(n as f64 - d);
            }
        }
    }

    let ratio = scene.reverb_to_direct_ratio();
    if ratio > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(STREAM_RIR);
        // energy envelope exp(-6 ln10 t / T60), i.e. 60 dB decay at T60
        let decay = 3.0 * std::f64::consts::LN_10 / scene.t60_s;
        let tail_energy = ratio * amplitude * amplitude;
        for (m, &d) in delays.iter().enumerate() {
            let onset = (d + TAIL_ONSET_S * fs).ceil() as usize;
            let env: Vec<f64> = (onset..len)
                .map(|n| (-decay * (n as f64 - d) / fs).exp())
                .collect();
            let env_energy: f64 = env.iter().map(|e| e * e).sum();
            let scale = (tail_energy / env_energy).sqrt();
            let peak = taps.row(m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let limit = TAIL_PEAK_RATIO * peak;
            for (i, e) in env.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = (scale * e * z).clamp(-limit, limit);
                taps[[m, onset + i]] += v;
            }
        }
    }

    let direct_indices = (0..m_count)
        .map(|m| {
            let row = taps.row(m);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.abs() > row[best].abs() {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(Rir {
        taps,
        sample_rate,
        direct_indices,
        direct_delays: delays,
        scene: scene.clone(),
        geometry: *geom,
    })
}

/// Rendered scene with every additive component kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRender {
    /// `speech + ambient + white`, after gains and level scaling.
    pub mixture: WaveformBuffer,
    pub speech: WaveformBuffer,
    pub ambient: WaveformBuffer,
    pub white: WaveformBuffer,
    pub gains_db: Vec<f64>,
    /// Global factor applied to reach the target peak level.
    pub level_scale: f64,
}

impl SceneRender {
    /// Per-channel speech-to-component energy ratio in dB.
    pub fn realized_snr_db(&self, component: &WaveformBuffer) -> Vec<Option<f64>> {
        (0..self.speech.num_channels())
            .map(|m| {
                let s = dsp::energy(self.speech.channel(m).as_slice().unwrap_or(&[]));
                let n = dsp::energy(component.channel(m).as_slice().unwrap_or(&[]));
                (n > 0.0).then(|| dsp::db(s / n))
            })
            .collect()
    }
}

fn pink(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    dsp::shape_spectrum(&white, |k, _| 1.0 / (k.max(1) as f64).sqrt())
}

fn scale_to_snr(noise: &mut [f64], speech_energy: f64, snr_db: f64) {
    let e = dsp::energy(noise);
    if e > 0.0 {
        let target = speech_energy / 10f64.powf(snr_db / 10.0);
        let g = (target / e).sqrt();
        noise.iter_mut().for_each(|v| *v *= g);
    }
}

pub fn render_scene(clean: &WaveformBuffer, rir: &Rir, scene: &RoomScene) -> Result<SceneRender> {
    scene.validate()?;
    if clean.num_channels() != 1 {
        return Err(Error::Shape(format!(
            "clean source must be mono, got {} channels",
            clean.num_channels()
        )));
    }
    if clean.sample_rate() != rir.sample_rate {
        return Err(Error::Config(format!(
            "clean source at {} Hz, RIR at {} Hz",
            clean.sample_rate(),
            rir.sample_rate
        )));
    }
    let src = clean.channel_vec(0);
    let chans = rir.num_channels();
    let speech: Vec<Vec<f64>> = (0..chans).map(|m| dsp::convolve(&src, &rir.channel(m))).collect();
    let len = speech[0].len();

    let mut ambient = vec![vec![0.0; len]; chans];
    if let Some(snr) = scene.ambient_snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(STREAM_AMBIENT);
        let common = pink(len, &mut rng);
        let (a, b) = (AMBIENT_COHERENCE.sqrt(), (1.0 - AMBIENT_COHERENCE).sqrt());
        for m in 0..chans {
            let own = pink(len, &mut rng);
            for i in 0..len {
                ambient[m][i] = a * common[i] + b * own[i];
            }
            scale_to_snr(&mut ambient[m], dsp::energy(&speech[m]), snr);
        }
    }
    let mut white = vec![vec![0.0; len]; chans];
    if let Some(snr) = scene.white_snr_db {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(STREAM_WHITE);
        for m in 0..chans {
            white[m] = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            scale_to_snr(&mut white[m], dsp::energy(&speech[m]), snr);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    rng.set_stream(STREAM_GAIN);
    let [lo, hi] = scene.gain_jitter_db;
    let gains_db: Vec<f64> = (0..chans)
        .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect();

    let mut peak: f64 = 0.0;
    for m in 0..chans {
        let g = 10f64.powf(gains_db[m] / 20.0);
        for i in 0..len {
            peak = peak.max((g * (speech[m][i] + ambient[m][i] + white[m][i])).abs());
        }
    }
    if peak == 0.0 {
        return Err(Error::Degenerate("rendered scene is silent".into()));
    }
    let target = 10f64.powf(scene.output_dbfs / 20.0);
    let level_scale = target / peak;

    let finish = |parts: &[Vec<f64>]| -> Vec<Vec<f64>> {
        parts
            .iter()
            .zip(&gains_db)
            .map(|(ch, gdb)| {
                let g = 10f64.powf(gdb / 20.0) * level_scale;
                ch.iter().map(|v| v * g).collect()
            })
            .collect()
    };
    let speech = finish(&speech);
    let ambient = finish(&ambient);
    let white = finish(&white);
    let mixture: Vec<Vec<f64>> = (0..chans)
        .map(|m| (0..len).map(|i| speech[m][i] + ambient[m][i] + white[m][i]).collect())
        .collect();
    let mix_peak = mixture
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    if mix_peak > 1.0 {
        return Err(Error::Clipping { peak: mix_peak });
    }

    let fs = clean.sample_rate();
    Ok(SceneRender {
        mixture: WaveformBuffer::from_channels(&mixture, fs)?,
        speech: WaveformBuffer::from_channels(&speech, fs)?,
        ambient: WaveformBuffer::from_channels(&ambient, fs)?,
        white: WaveformBuffer::from_channels(&white, fs)?,
        gains_db,
        level_scale,
    })
}
