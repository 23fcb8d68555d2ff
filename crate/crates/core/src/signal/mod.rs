//! Time-domain buffers, STFT analysis/synthesis and log-power features.

mod features;
mod stft;
pub mod wav;

pub use features::{log_power_normalize, LogPowerTensor, LOG_POWER_FLOOR};
pub use stft::{istft, stft, Spectrogram, StftConfig, StftPreset, WindowKind};

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

/// Sample rate of the reference pipeline.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Multichannel real-valued signal, stored channels × samples.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformBuffer {
    samples: Array2<f64>,
    sample_rate: u32,
}

impl WaveformBuffer {
    pub fn new(samples: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.nrows() == 0 {
            return Err(Error::Shape("waveform needs at least one channel".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let len = samples.len();
        let arr = Array2::from_shape_vec((1, len), samples)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(arr, sample_rate)
    }

    pub fn from_channels(channels: &[Vec<f64>], sample_rate: u32) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Shape("channels have different lengths".into()));
        }
        let mut arr = Array2::zeros((channels.len(), len));
        for (mut row, ch) in arr.rows_mut().into_iter().zip(channels) {
            row.assign(&ArrayView1::from(ch.as_slice()));
        }
        Self::new(arr, sample_rate)
    }

    pub fn num_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn channel(&self, m: usize) -> ArrayView1<'_, f64> {
        self.samples.row(m)
    }

    pub fn channel_vec(&self, m: usize) -> Vec<f64> {
        self.samples.row(m).to_vec()
    }

    pub fn select_channel(&self, m: usize) -> Result<Self> {
        if m >= self.num_channels() {
            return Err(Error::Config(format!(
                "channel {m} out of range for {}-channel signal",
                self.num_channels()
            )));
        }
        Self::mono(self.channel_vec(m), self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|v| v * v).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn into_samples(self) -> Array2<f64> {
        self.samples
    }
}
