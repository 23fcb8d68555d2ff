//! Processing chains: dereverberation, then beamforming, then channel combination.

use std::path::PathBuf;

use ndarray::{s, Array2, Array3, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamform::{
    apply_beamset, design_beamset, ArrayGeometry, BeamSet, NoiseModel, DEFAULT_DIAGONAL_LOADING,
    DEFAULT_NUM_BEAMS,
};
use crate::dereverb::{wpe, WpeConfig, WpeMode};
use crate::error::{Error, Result};
use crate::sacc::{average_weights, sacc_forward, SaccParams, TrainingItem};
use crate::signal::{
    istft, log_power_normalize, stft, Spectrogram, StftPreset, WaveformBuffer, DEFAULT_SAMPLE_RATE,
    LOG_POWER_FLOOR,
};

/// Channel of the single-distant-microphone baseline (the fourth mic).
pub const SDM_CHANNEL: usize = 3;

pub const PRESET_NAMES: [&str; 7] = [
    "sdm",
    "sacc",
    "wpes-sacc",
    "wpem-sacc",
    "fmbu-sacc",
    "fmbi-sacc",
    "wpem-fmbu-sacc",
];

fn default_num_beams() -> usize {
    DEFAULT_NUM_BEAMS
}

fn default_loading() -> f64 {
    DEFAULT_DIAGONAL_LOADING
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamformerStage {
    pub model: NoiseModel,
    #[serde(default = "default_num_beams")]
    pub num_beams: usize,
    #[serde(default = "default_loading")]
    pub diagonal_loading: f64,
    #[serde(default)]
    pub geometry: ArrayGeometry,
}

impl BeamformerStage {
    pub fn new(model: NoiseModel) -> Self {
        Self {
            model,
            num_beams: DEFAULT_NUM_BEAMS,
            diagonal_loading: DEFAULT_DIAGONAL_LOADING,
            geometry: ArrayGeometry::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Combiner {
    Sacc { params: PathBuf },
    Mean,
    SingleChannel { channel: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub stft: StftPreset,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Absent or `null` skips dereverberation.
    #[serde(default)]
    pub wpe: Option<WpeConfig>,
    /// Absent or `null` skips beamforming.
    #[serde(default)]
    pub beamformer: Option<BeamformerStage>,
    pub combiner: Combiner,
    #[serde(default)]
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Named chain; SACC presets need a parameter file.
    pub fn preset(name: &str, sacc_params: Option<PathBuf>) -> Result<Self> {
        let wpe = |mode| Some(WpeConfig::fifty_ms(mode));
        let (wpe, beamformer) = match name {
            "sdm" => {
                return Ok(Self {
                    stft: StftPreset::default(),
                    sample_rate: DEFAULT_SAMPLE_RATE,
                    wpe: None,
                    beamformer: None,
                    combiner: Combiner::SingleChannel {
                        channel: SDM_CHANNEL,
                    },
                    seed: 0,
                })
            }
            "sacc" => (None, None),
            "wpes-sacc" => (wpe(WpeMode::Siso), None),
            "wpem-sacc" => (wpe(WpeMode::Mimo), None),
            "fmbu-sacc" => (None, Some(BeamformerStage::new(NoiseModel::Uncorrelated))),
            "fmbi-sacc" => (
                None,
                Some(BeamformerStage::new(NoiseModel::SphericallyIsotropic)),
            ),
            "wpem-fmbu-sacc" => (
                wpe(WpeMode::Mimo),
                Some(BeamformerStage::new(NoiseModel::Uncorrelated)),
            ),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let params = sacc_params
            .ok_or_else(|| Error::Config(format!("preset '{name}' needs SACC parameters")))?;
        Ok(Self {
            stft: StftPreset::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            wpe,
            beamformer,
            combiner: Combiner::Sacc { params },
            seed: 0,
        })
    }

    /// Channel count reaching the combiner for an `input_channels` recording.
    pub fn combiner_channels(&self, input_channels: usize) -> usize {
        self.beamformer
            .as_ref()
            .map_or(input_channels, |b| b.num_beams)
    }

    /// Static checks that do not touch the file system.
    pub fn validate(&self, input_channels: usize) -> Result<()> {
        let at = |stage: &str, e: Error| Error::Config(format!("{stage}: {e}"));
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate: must be positive".into()));
        }
        self.stft.config().validate().map_err(|e| at("stft", e))?;
        if input_channels == 0 {
            return Err(Error::Config("input: no channels".into()));
        }
        if let Some(w) = &self.wpe {
            w.validate().map_err(|e| at("wpe", e))?;
        }
        if let Some(b) = &self.beamformer {
            b.geometry.validate().map_err(|e| at("beamformer.geometry", e))?;
            if b.geometry.num_mics != input_channels {
                return Err(Error::Config(format!(
                    "beamformer.geometry: {} mics but the input has {input_channels} channels",
                    b.geometry.num_mics
                )));
            }
            if b.num_beams == 0 {
                return Err(Error::Config("beamformer.num_beams: must be >= 1".into()));
            }
            if !(b.diagonal_loading > 0.0 && b.diagonal_loading.is_finite()) {
                return Err(Error::Config("beamformer.diagonal_loading: must be > 0".into()));
            }
        }
        if let Combiner::SingleChannel { channel } = self.combiner {
            let available = self.combiner_channels(input_channels);
            if channel >= available {
                return Err(Error::Config(format!(
                    "combiner.channel: {channel} out of range for {available} channels"
                )));
            }
        }
        Ok(())
    }
}

/// A validated chain with its beam set designed and SACC parameters loaded.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub input_channels: usize,
    pub beams: Option<BeamSet>,
    pub sacc: Option<SaccParams>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub output: WaveformBuffer,
    /// Frame weights of the combiner (`T x C`), absent for single-channel.
    pub weights: Option<Array2<f64>>,
    /// Intermediate multichannel signals, in stage order.
    pub stages: Vec<(String, WaveformBuffer)>,
}

impl Pipeline {
    /// Validate and load everything up front so no processing starts on a bad config.
    pub fn prepare(config: PipelineConfig, input_channels: usize) -> Result<Self> {
        config.validate(input_channels)?;
        let stft_cfg = config.stft.config();
        let beams = match &config.beamformer {
            Some(b) => Some(design_beamset(
                &b.geometry,
                b.model,
                b.diagonal_loading,
                b.num_beams,
                &stft_cfg.bin_frequencies(config.sample_rate),
            )?),
            None => None,
        };
        let sacc = match &config.combiner {
            Combiner::Sacc { params } => {
                let p = SaccParams::load(params).map_err(|e| match e {
                    Error::Io(io) => Error::Config(format!(
                        "combiner.params: cannot read {}: {io}",
                        params.display()
                    )),
                    other => other,
                })?;
                if p.num_bins() != stft_cfg.num_bins() {
                    return Err(Error::Config(format!(
                        "combiner.params: trained for {} bins, stft preset has {}",
                        p.num_bins(),
                        stft_cfg.num_bins()
                    )));
                }
                Some(p)
            }
            _ => None,
        };
        Ok(Self {
            config,
            input_channels,
            beams,
            sacc,
        })
    }

    /// Build a chain with in-memory SACC parameters (used for training and tests).
    pub fn with_params(config: PipelineConfig, input_channels: usize, params: Option<SaccParams>) -> Result<Self> {
        let mut cfg = config.clone();
        let sacc_requested = matches!(cfg.combiner, Combiner::Sacc { .. });
        if sacc_requested {
            cfg.combiner = Combiner::Mean;
        }
        let mut pipeline = Self::prepare(cfg, input_channels)?;
        pipeline.config = config;
        if sacc_requested {
            let p = params.ok_or_else(|| Error::Config("combiner: SACC parameters missing".into()))?;
            if p.num_bins() != pipeline.config.stft.config().num_bins() {
                return Err(Error::Config("combiner.params: bin count mismatch".into()));
            }
            pipeline.sacc = Some(p);
        }
        Ok(pipeline)
    }

    fn check_input(&self, wave: &WaveformBuffer) -> Result<()> {
        if wave.num_channels() != self.input_channels {
            return Err(Error::Config(format!(
                "input has {} channels, pipeline prepared for {}",
                wave.num_channels(),
                self.input_channels
            )));
        }
        if wave.sample_rate() != self.config.sample_rate {
            return Err(Error::Config(format!(
                "input at {} Hz, pipeline expects {} Hz",
                wave.sample_rate(),
                self.config.sample_rate
            )));
        }
        Ok(())
    }

    /// Dereverberation and beamforming stages; returns each stage's spectrogram.
    pub fn front_end(&self, wave: &WaveformBuffer) -> Result<Vec<(String, Spectrogram)>> {
        self.check_input(wave)?;
        let stft_cfg = self.config.stft.config();
        let mut current = stft(wave, &stft_cfg)?;
        let mut stages = Vec::new();
        if let Some(w) = &self.config.wpe {
            current = wpe(&current, w)?.0;
            stages.push(("wpe".to_string(), current.clone()));
        }
        if let Some(beams) = &self.beams {
            current = apply_beamset(&current, beams)?;
            stages.push(("beamformer".to_string(), current.clone()));
        }
        if stages.is_empty() {
            stages.push(("input".to_string(), current));
        }
        Ok(stages)
    }

    pub fn run(&self, wave: &WaveformBuffer, keep_stages: bool) -> Result<PipelineOutput> {
        self.check_input(wave)?;
        let stft_cfg = self.config.stft.config();
        let no_front_end = self.config.wpe.is_none() && self.beams.is_none();
        if let (Combiner::SingleChannel { channel }, true) = (&self.config.combiner, no_front_end) {
            return Ok(PipelineOutput {
                output: wave.select_channel(*channel)?,
                weights: None,
                stages: Vec::new(),
            });
        }
        let stages = self.front_end(wave)?;
        let spec = &stages.last().expect("at least one stage").1;
        let (output, weights) = match &self.config.combiner {
            Combiner::SingleChannel { channel } => (istft(&spec.select_channel(*channel)?, &stft_cfg)?, None),
            Combiner::Mean => {
                let (t, c, _) = spec.data.dim();
                let w = Array2::from_elem((t, c), 1.0 / c as f64);
                (istft(&render_weighted(spec, &w)?, &stft_cfg)?, Some(w))
            }
            Combiner::Sacc { .. } => {
                let params = self
                    .sacc
                    .as_ref()
                    .ok_or_else(|| Error::Config("combiner: SACC parameters not loaded".into()))?;
                let x = log_power_normalize(spec);
                let out = sacc_forward(&x.data, params)?;
                (istft(&render_weighted(spec, &out.w)?, &stft_cfg)?, Some(out.w))
            }
        };
        let stages = if keep_stages {
            stages
                .into_iter()
                .filter(|(name, _)| name != "input")
                .map(|(name, s)| Ok((name, istft(&s, &stft_cfg)?)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(PipelineOutput {
            output,
            weights,
            stages,
        })
    }
}

/// Single-channel spectrogram from per-frame channel weights.
///
/// Magnitude is the weighted geometric mean of the channel magnitudes (the
/// weighted sum of log powers); phase is taken from the channel with the
/// largest mean weight, lowest index on ties.
pub fn render_weighted(spec: &Spectrogram, w: &Array2<f64>) -> Result<Spectrogram> {
    let (t_len, c, f) = spec.data.dim();
    if w.dim() != (t_len, c) {
        return Err(Error::Shape(format!(
            "weights are {:?}, spectrogram has {t_len} frames and {c} channels",
            w.dim()
        )));
    }
    let profile = average_weights(w)?;
    let mut phase_ch = 0;
    for (i, p) in profile.iter().enumerate() {
        if *p > profile[phase_ch] {
            phase_ch = i;
        }
    }
    let mut data = Array3::<Complex64>::zeros((t_len, 1, f));
    for t in 0..t_len {
        for k in 0..f {
            let mut log_power = 0.0;
            for m in 0..c {
                log_power += w[[t, m]] * spec.data[[t, m, k]].norm_sqr().max(LOG_POWER_FLOOR).ln();
            }
            let reference = spec.data[[t, phase_ch, k]];
            let magnitude = (0.5 * log_power).exp();
            let phase = if reference.norm_sqr() > 0.0 {
                reference / reference.norm()
            } else {
                Complex64::new(1.0, 0.0)
            };
            data[[t, 0, k]] = phase * magnitude;
        }
    }
    Ok(spec.with_data(data))
}

/// Keep only the first `frames` frames.
pub fn truncate_frames(spec: &Spectrogram, frames: usize) -> Spectrogram {
    let frames = frames.min(spec.num_frames());
    let mut out = spec.with_data(spec.data.slice(s![..frames, .., ..]).to_owned());
    let cfg = spec.config;
    out.num_samples = out
        .num_samples
        .min((frames.saturating_sub(1)) * cfg.hop_size + cfg.fft_size);
    out
}

/// SACC training pair: combiner input features against the clean source.
///
/// Both are cut to the frames spanned by `clean` so the silent reverberant
/// tail after the utterance does not dominate the loss.
pub fn training_item(combiner_input: &Spectrogram, clean: &WaveformBuffer) -> Result<TrainingItem> {
    if clean.num_channels() != 1 {
        return Err(Error::Shape("clean reference must be mono".into()));
    }
    let cfg = combiner_input.config;
    let frames = cfg.num_frames(clean.len()).min(combiner_input.num_frames());
    let x = log_power_normalize(&truncate_frames(combiner_input, frames));
    let target_spec = stft(clean, &cfg)?;
    let y = log_power_normalize(&truncate_frames(&target_spec, frames));
    Ok(TrainingItem {
        input: x.data,
        target: y.data.index_axis(Axis(1), 0).to_owned(),
    })
}
