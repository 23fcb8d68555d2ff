use std::f64::consts::PI;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::WaveformBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::SqrtHann => (0..len)
                .map(|n| (0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).max(0.0).sqrt())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// Shipped STFT configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StftPreset {
    /// 512-point FFT, 128-sample hop.
    #[default]
    Wideband,
    /// 1024-point FFT, 256-sample hop.
    HighResolution,
}

impl StftPreset {
    pub const ALL: [StftPreset; 2] = [StftPreset::Wideband, StftPreset::HighResolution];

    pub fn config(self) -> StftConfig {
        match self {
            StftPreset::Wideband => StftConfig::new(512, 128, WindowKind::SqrtHann),
            StftPreset::HighResolution => StftConfig::new(1024, 256, WindowKind::SqrtHann),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftPreset::Wideband.config()
    }
}

impl StftConfig {
    pub const fn new(fft_size: usize, hop_size: usize, window: WindowKind) -> Self {
        Self {
            fft_size,
            hop_size,
            window,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        self.window.coefficients(self.fft_size)
    }

    /// Centre frequency of every bin, 0 … fs/2.
    pub fn bin_frequencies(&self, sample_rate: u32) -> Vec<f64> {
        (0..self.num_bins())
            .map(|k| k as f64 * sample_rate as f64 / self.fft_size as f64)
            .collect()
    }

    /// Number of frames produced for a signal of `len` samples (tail zero-padded).
    pub fn num_frames(&self, len: usize) -> usize {
        if len <= self.fft_size {
            1
        } else {
            1 + (len - self.fft_size).div_ceil(self.hop_size)
        }
    }

    /// Sum of squared shifted windows, constant over time for a valid config.
    pub fn overlap_gain(&self) -> f64 {
        let profile = self.overlap_profile();
        profile.iter().sum::<f64>() / profile.len() as f64
    }

    fn overlap_profile(&self) -> Vec<f64> {
        let w = self.window();
        (0..self.hop_size)
            .map(|n| {
                (n..self.fft_size)
                    .step_by(self.hop_size)
                    .map(|i| w[i] * w[i])
                    .sum()
            })
            .collect()
    }

    /// Checks sizes and the constant-overlap-add condition on the squared window.
    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::Config(format!(
                "fft_size must be even and >= 2, got {}",
                self.fft_size
            )));
        }
        if self.hop_size == 0 || self.hop_size > self.fft_size {
            return Err(Error::Config(format!(
                "hop_size must be in 1..={}, got {}",
                self.fft_size, self.hop_size
            )));
        }
        let profile = self.overlap_profile();
        let mean = profile.iter().sum::<f64>() / profile.len() as f64;
        let worst = profile.iter().map(|p| (p - mean).abs()).fold(0.0, f64::max);
        if mean <= 0.0 || worst > 1e-9 * mean {
            return Err(Error::Config(format!(
                "window {:?} with fft_size {} and hop {} is not constant-overlap-add",
                self.window, self.fft_size, self.hop_size
            )));
        }
        Ok(())
    }
}

/// Complex STFT tensor laid out frames × channels × bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub data: Array3<Complex64>,
    pub sample_rate: u32,
    pub config: StftConfig,
    /// Length of the analysed signal, used to trim synthesis output.
    pub num_samples: usize,
}

impl Spectrogram {
    pub fn new(
        data: Array3<Complex64>,
        sample_rate: u32,
        config: StftConfig,
        num_samples: usize,
    ) -> Result<Self> {
        if data.dim().2 != config.num_bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, config expects {}",
                data.dim().2,
                config.num_bins()
            )));
        }
        Ok(Self {
            data,
            sample_rate,
            config,
            num_samples,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn num_channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn num_bins(&self) -> usize {
        self.data.dim().2
    }

    /// Same metadata, new data (shape may differ on the channel axis).
    pub fn with_data(&self, data: Array3<Complex64>) -> Self {
        Self {
            data,
            sample_rate: self.sample_rate,
            config: self.config,
            num_samples: self.num_samples,
        }
    }

    pub fn bin_frequencies(&self) -> Vec<f64> {
        self.config.bin_frequencies(self.sample_rate)
    }

    pub fn select_channel(&self, m: usize) -> Result<Self> {
        if m >= self.num_channels() {
            return Err(Error::Config(format!(
                "channel {m} out of range for {}-channel spectrogram",
                self.num_channels()
            )));
        }
        let data = self
            .data
            .slice(ndarray::s![.., m..m + 1, ..])
            .to_owned();
        Ok(self.with_data(data))
    }
}

/// Forward STFT: no centring pad, tail zero-padded to complete the last frame.
pub fn stft(wave: &WaveformBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let len = wave.len();
    if len < cfg.fft_size {
        return Err(Error::TooShort {
            len,
            needed: cfg.fft_size,
        });
    }
    let n = cfg.fft_size;
    let frames = cfg.num_frames(len);
    let bins = cfg.num_bins();
    let channels = wave.num_channels();
    let window = cfg.window();

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();

    let mut data = Array3::<Complex64>::zeros((frames, channels, bins));
    for m in 0..channels {
        let x = wave.channel(m);
        for t in 0..frames {
            let start = t * cfg.hop_size;
            for (i, slot) in input.iter_mut().enumerate() {
                let idx = start + i;
                *slot = if idx < len { x[idx] * window[i] } else { 0.0 };
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| Error::Degenerate(e.to_string()))?;
            for (k, v) in output.iter().enumerate() {
                data[[t, m, k]] = *v;
            }
        }
    }
    Spectrogram::new(data, wave.sample_rate(), *cfg, len)
}

/// Weighted overlap-add synthesis; inverse of [`stft`] on the interior samples.
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<WaveformBuffer> {
    cfg.validate()?;
    if spec.num_bins() != cfg.num_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            spec.num_bins(),
            cfg.num_bins()
        )));
    }
    let n = cfg.fft_size;
    let frames = spec.num_frames();
    let channels = spec.num_channels();
    let padded = (frames - 1) * cfg.hop_size + n;
    let window = cfg.window();
    let norm = 1.0 / (n as f64 * cfg.overlap_gain());

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();

    let mut out = Array2::<f64>::zeros((channels, padded));
    for m in 0..channels {
        for t in 0..frames {
            for (k, slot) in input.iter_mut().enumerate() {
                *slot = spec.data[[t, m, k]];
            }
            // real signals have purely real DC and Nyquist bins
            input[0].im = 0.0;
            if let Some(last) = input.last_mut() {
                last.im = 0.0;
            }
            ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| Error::Degenerate(e.to_string()))?;
            let start = t * cfg.hop_size;
            for i in 0..n {
                out[[m, start + i]] += output[i] * window[i] * norm;
            }
        }
    }
    let keep = spec.num_samples.min(padded);
    let trimmed = out.slice(ndarray::s![.., ..keep]).to_owned();
    WaveformBuffer::new(trimmed, spec.sample_rate)
}
