//! Command-line front end. Each command reads its inputs, delegates to the
//! library and writes JSON/CSV/WAV outputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::beamform::{
    beampattern, beampattern_csv, design_beamset, ArrayGeometry, BeamSet, NoiseModel,
    DEFAULT_DIAGONAL_LOADING, DEFAULT_NUM_BEAMS,
};
use crate::error::{Error, Result};
use crate::metrics::{
    array_early_reference_snr, c50_from_rir, drr_from_rir, early_reference_snr, effective_c50,
    localization_error, MetricReport,
};
use crate::pipeline::{training_item, Combiner, Pipeline, PipelineConfig};
use crate::sacc::{average_weights, localize, sacc_train, weights_csv, SaccTrainConfig};
use crate::scene::{generate_rir, render_scene, RoomScene};
use crate::signal::wav::{read_wav, write_wav, WavEncoding};
use crate::signal::{StftPreset, DEFAULT_SAMPLE_RATE};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "SFE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sfe", version, about = "Multi-channel distant-speech front-end")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a reverberant multichannel scene from a clean mono recording.
    Simulate(SimulateArgs),
    /// Run a processing chain on a multichannel recording.
    Process(ProcessArgs),
    /// Design a fixed beam set and optionally export a beampattern.
    DesignBeams(DesignBeamsArgs),
    /// Train combinator parameters from a manifest of scenes.
    TrainSacc(TrainSaccArgs),
    /// Score a processed signal against the scene it came from.
    Report(ReportArgs),
    /// Estimate the source azimuth from combinator weights.
    Localize(LocalizeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Array geometry JSON; defaults to 8 mics at 33 mm.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "float32")]
    pub encoding: EncodingArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum EncodingArg {
    Pcm16,
    Float32,
}

impl From<EncodingArg> for WavEncoding {
    fn from(e: EncodingArg) -> Self {
        match e {
            EncodingArg::Pcm16 => WavEncoding::Pcm16,
            EncodingArg::Float32 => WavEncoding::Float32,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProcessArgs {
    /// Pipeline JSON.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub pipeline: Option<PathBuf>,
    /// Named chain: sdm, sacc, wpes-sacc, wpem-sacc, fmbu-sacc, fmbi-sacc, wpem-fmbu-sacc.
    #[arg(long)]
    pub preset: Option<String>,
    /// Combinator parameters for SACC presets.
    #[arg(long)]
    pub sacc_params: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every intermediate stage and the combiner weights.
    #[arg(long)]
    pub dump_stages: bool,
    #[arg(long, value_enum, default_value = "float32")]
    pub encoding: EncodingArg,
}

#[derive(Debug, Args)]
pub struct DesignBeamsArgs {
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub beampattern: Option<PathBuf>,
    /// Beam exported by `--beampattern`.
    #[arg(long, default_value_t = DEFAULT_NUM_BEAMS / 2)]
    pub pattern_beam: usize,
    #[arg(long, default_value_t = DEFAULT_NUM_BEAMS)]
    pub num_beams: usize,
    #[arg(long, default_value_t = DEFAULT_DIAGONAL_LOADING)]
    pub loading: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_RATE)]
    pub sample_rate: u32,
    #[arg(long, value_enum, default_value = "wideband")]
    pub stft: StftArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum StftArg {
    Wideband,
    HighResolution,
}

impl From<StftArg> for StftPreset {
    fn from(s: StftArg) -> Self {
        match s {
            StftArg::Wideband => StftPreset::Wideband,
            StftArg::HighResolution => StftPreset::HighResolution,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainSaccArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace JSON; defaults to `<out>.loss.json`.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub processed: PathBuf,
    #[arg(long)]
    pub sidecar: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score against this microphone's early reference instead of the array-coherent one.
    #[arg(long)]
    pub reference_channel: Option<usize>,
    /// Also identify the processing chain with this many taps and report its C50.
    #[arg(long)]
    pub identify_taps: Option<usize>,
    /// Localization JSON whose azimuth is compared with the scene's.
    #[arg(long)]
    pub localization: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    /// Weight CSV written by `process --dump-stages`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub beams: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Metadata written next to a simulated scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSidecar {
    pub scene: RoomScene,
    pub geometry: ArrayGeometry,
    pub sample_rate: u32,
    /// File names relative to the sidecar.
    pub mixture_wav: String,
    pub clean_wav: String,
    pub oracle_azimuth_deg: f64,
    pub oracle_range_m: f64,
    pub seed: u64,
    pub rir_length: usize,
    pub direct_indices: Vec<usize>,
    pub c50_db: Vec<f64>,
    pub drr_db: Vec<f64>,
    pub gains_db: Vec<f64>,
    pub ambient_snr_db: Vec<Option<f64>>,
    pub white_snr_db: Vec<Option<f64>>,
}

/// Training manifest: a front end (combiner ignored), training settings,
/// and scenes given by their sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainManifest {
    pub pipeline: PipelineConfig,
    pub train: SaccTrainConfig,
    /// Sidecar paths, relative to the manifest.
    pub scenes: Vec<PathBuf>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

fn load_geometry(path: Option<&Path>) -> Result<ArrayGeometry> {
    let geom = match path {
        Some(p) => read_json(p, "geometry")?,
        None => ArrayGeometry::default(),
    };
    geom.validate()?;
    Ok(geom)
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(rel)
    }
}

/// Output path next to `out` with `suffix` replacing its extension.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scene: RoomScene = read_json(&args.scene, "scene")?;
    scene.validate()?;
    let geom = load_geometry(args.geometry.as_deref())?;
    let clean = read_wav(&args.clean, None)?;
    if clean.num_channels() != 1 {
        return Err(Error::Config(format!(
            "{}: clean recording must be mono",
            args.clean.display()
        )));
    }
    let rir = generate_rir(&scene, &geom, clean.sample_rate())?;
    let render = render_scene(&clean, &rir, &scene)?;
    fs::create_dir_all(&args.out)?;
    let encoding = args.encoding.into();
    write_wav(args.out.join("mixture.wav"), &render.mixture, encoding)?;
    write_wav(args.out.join("clean.wav"), &clean, WavEncoding::Float32)?;
    let sidecar = SceneSidecar {
        scene: scene.clone(),
        geometry: geom,
        sample_rate: clean.sample_rate(),
        mixture_wav: "mixture.wav".into(),
        clean_wav: "clean.wav".into(),
        oracle_azimuth_deg: scene.azimuth_deg,
        oracle_range_m: scene.range_m,
        seed: scene.seed,
        rir_length: rir.len(),
        direct_indices: rir.direct_indices.clone(),
        c50_db: c50_from_rir(&rir)?,
        drr_db: drr_from_rir(&rir),
        gains_db: render.gains_db.clone(),
        ambient_snr_db: render.realized_snr_db(&render.ambient),
        white_snr_db: render.realized_snr_db(&render.white),
    };
    write_text(&args.out.join("sidecar.json"), &serde_json::to_string_pretty(&sidecar)?)
}

fn process_config(args: &ProcessArgs) -> Result<PipelineConfig> {
    match (&args.pipeline, &args.preset) {
        (Some(path), _) => {
            let mut cfg = PipelineConfig::from_json(&read_text(path)?)?;
            if let Combiner::Sacc { params } = &mut cfg.combiner {
                *params = resolve(path, params);
            }
            Ok(cfg)
        }
        (None, Some(name)) => PipelineConfig::preset(name, args.sacc_params.clone()),
        (None, None) => Err(Error::Config("either --pipeline or --preset is required".into())),
    }
}

pub fn cmd_process(args: &ProcessArgs) -> Result<()> {
    let cfg = process_config(args)?;
    // header-only read so a bad config fails before the audio is decoded
    let spec = hound::WavReader::open(&args.input)?.spec();
    let pipeline = Pipeline::prepare(cfg, spec.channels as usize)?;
    let input = read_wav(&args.input, Some(pipeline.config.sample_rate))?;
    let result = pipeline.run(&input, args.dump_stages)?;
    let encoding = args.encoding.into();
    write_wav(&args.out, &result.output, encoding)?;
    if args.dump_stages {
        for (name, wave) in &result.stages {
            write_wav(sibling(&args.out, &format!("{name}.wav")), wave, encoding)?;
        }
        if let Some(w) = &result.weights {
            write_text(&sibling(&args.out, "weights.csv"), &weights_csv(w))?;
        }
    }
    Ok(())
}

pub fn cmd_design_beams(args: &DesignBeamsArgs) -> Result<()> {
    let geom = load_geometry(args.geometry.as_deref())?;
    let model: NoiseModel = args.model.parse()?;
    if args.pattern_beam >= args.num_beams {
        return Err(Error::Config(format!(
            "--pattern-beam {} out of range for {} beams",
            args.pattern_beam, args.num_beams
        )));
    }
    let cfg = StftPreset::from(args.stft).config();
    let freqs = cfg.bin_frequencies(args.sample_rate);
    let beams = design_beamset(&geom, model, args.loading, args.num_beams, &freqs)?;
    write_text(&args.out, &beams.to_json()?)?;
    if let Some(path) = &args.beampattern {
        let azimuths: Vec<f64> = (0..=180).map(f64::from).collect();
        let gains = beampattern(beams.beam(args.pattern_beam), &geom, &azimuths, &freqs)?;
        write_text(path, &beampattern_csv(&gains, &azimuths, &freqs))?;
    }
    Ok(())
}

/// Training data for one scene: front-end output features and clean target.
fn scene_training_item(
    pipeline: &Pipeline,
    sidecar_path: &Path,
) -> Result<crate::sacc::TrainingItem> {
    let sidecar: SceneSidecar = read_json(sidecar_path, "sidecar")?;
    let rate = Some(pipeline.config.sample_rate);
    let mixture = read_wav(resolve(sidecar_path, Path::new(&sidecar.mixture_wav)), rate)?;
    let clean = read_wav(resolve(sidecar_path, Path::new(&sidecar.clean_wav)), rate)?;
    let stages = pipeline.front_end(&mixture)?;
    training_item(&stages.last().expect("at least one stage").1, &clean)
}

pub fn cmd_train_sacc(args: &TrainSaccArgs) -> Result<()> {
    let manifest: TrainManifest = read_json(&args.manifest, "manifest")?;
    manifest.train.validate()?;
    if manifest.scenes.is_empty() {
        return Err(Error::Config("manifest: no scenes".into()));
    }
    let first: SceneSidecar = read_json(&resolve(&args.manifest, &manifest.scenes[0]), "sidecar")?;
    let mut front = manifest.pipeline.clone();
    front.combiner = Combiner::Mean;
    let pipeline = Pipeline::prepare(front, first.geometry.num_mics)?;
    let items = manifest
        .scenes
        .iter()
        .map(|p| scene_training_item(&pipeline, &resolve(&args.manifest, p)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = sacc_train(&items, &manifest.train)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    outcome.params.save(&args.out)?;
    let trace = args.trace.clone().unwrap_or_else(|| sibling(&args.out, "loss.json"));
    write_text(&trace, &outcome.loss_trace_json()?)
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let sidecar: SceneSidecar = read_json(&args.sidecar, "sidecar")?;
    let rate = Some(sidecar.sample_rate);
    let processed = read_wav(&args.processed, rate)?;
    let clean = read_wav(resolve(&args.sidecar, Path::new(&sidecar.clean_wav)), rate)?;
    let processed = if processed.num_channels() == 1 {
        processed
    } else {
        processed.select_channel(0)?
    };
    let rir = generate_rir(&sidecar.scene, &sidecar.geometry, sidecar.sample_rate)?;
    let snr = match args.reference_channel {
        Some(m) => early_reference_snr(&processed, &clean, &rir, m)?,
        None => array_early_reference_snr(&processed, &clean, &rir)?,
    };
    let effective = match args.identify_taps {
        Some(taps) => Some(effective_c50(
            &processed.channel_vec(0),
            &clean.channel_vec(0),
            taps,
            sidecar.sample_rate,
        )?),
        None => None,
    };
    let loc_error = match &args.localization {
        Some(path) => {
            let loc: crate::sacc::Localization = read_json(path, "localization")?;
            Some(localization_error(loc.azimuth_deg, sidecar.oracle_azimuth_deg))
        }
        None => None,
    };
    let report = MetricReport {
        c50_db: c50_from_rir(&rir)?,
        drr_db: drr_from_rir(&rir),
        early_reference_snr_db: Some(snr),
        effective_c50_db: effective,
        localization_error_deg: loc_error,
        ambient_snr_db: sidecar.ambient_snr_db.clone(),
        white_snr_db: sidecar.white_snr_db.clone(),
    };
    write_text(&args.out, &report.to_json()?)
}

fn parse_weights_csv(text: &str) -> Result<ndarray::Array2<f64>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("weights CSV is empty".into()))?;
    let cols = header.split(',').count();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("weights CSV line {}: {e}", i + 2)))?;
        if row.len() != cols {
            return Err(Error::Config(format!("weights CSV line {}: expected {cols} values", i + 2)));
        }
        values.extend(row);
        rows += 1;
    }
    ndarray::Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Shape(e.to_string()))
}

pub fn cmd_localize(args: &LocalizeArgs) -> Result<()> {
    let w = parse_weights_csv(&read_text(&args.weights)?)?;
    let beams = BeamSet::from_json(&read_text(&args.beams)?)?;
    let profile = average_weights(&w)?;
    let loc = localize(&profile, &beams)?;
    write_text(&args.out, &loc.to_json()?)
}

/// Size the global worker pool from the environment.
pub fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        let n: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={value} is not a thread count")))?;
        if n == 0 {
            return Err(Error::Config(format!("{THREADS_ENV} must be >= 1")));
        }
        // a second initialization (e.g. in tests) keeps the existing pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Process(a) => cmd_process(a),
        Command::DesignBeams(a) => cmd_design_beams(a),
        Command::TrainSacc(a) => cmd_train_sacc(a),
        Command::Report(a) => cmd_report(a),
        Command::Localize(a) => cmd_localize(a),
    }
}
