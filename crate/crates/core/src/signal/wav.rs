//! Multichannel WAV I/O (16-bit PCM and 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::WaveformBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WavEncoding {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a WAV file; `expected_rate` rejects files at any other rate.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<WaveformBuffer> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if let Some(rate) = expected_rate {
        if spec.sample_rate != rate {
            return Err(Error::Config(format!(
                "{}: sample rate {} Hz does not match configured {} Hz",
                path.as_ref().display(),
                spec.sample_rate,
                rate
            )));
        }
    }
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Config(format!(
                "unsupported WAV encoding: {fmt:?} {bits}-bit"
            )))
        }
    };
    let frames = interleaved.len() / channels;
    let samples = Array2::from_shape_fn((channels, frames), |(c, n)| interleaved[n * channels + c]);
    WaveformBuffer::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &WaveformBuffer, encoding: WavEncoding) -> Result<()> {
    let spec = WavSpec {
        channels: wave.num_channels() as u16,
        sample_rate: wave.sample_rate(),
        bits_per_sample: match encoding {
            WavEncoding::Pcm16 => 16,
            WavEncoding::Float32 => 32,
        },
        sample_format: match encoding {
            WavEncoding::Pcm16 => SampleFormat::Int,
            WavEncoding::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path.as_ref(), spec)?;
    let data = wave.samples();
    for n in 0..wave.len() {
        for c in 0..wave.num_channels() {
            let v = data[[c, n]];
            match encoding {
                WavEncoding::Pcm16 => {
                    let q = (v * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                    writer.write_sample(q)?;
                }
                WavEncoding::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WaveformBuffer {
        WaveformBuffer::from_channels(
            &[vec![0.0, 0.25, -0.5, 0.125], vec![0.5, -0.25, 0.0, -1.0]],
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn float_round_trip_is_exact_for_representable_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = sample();
        write_wav(&path, &w, WavEncoding::Float32).unwrap();
        assert_eq!(read_wav(&path, Some(16_000)).unwrap(), w);
    }

    #[test]
    fn pcm16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = sample();
        write_wav(&path, &w, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path, None).unwrap();
        assert_eq!(back.num_channels(), 2);
        for (a, b) in back.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        write_wav(&path, &sample(), WavEncoding::Float32).unwrap();
        assert!(matches!(read_wav(&path, Some(8_000)), Err(Error::Config(_))));
    }
}
