#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spatial_frontend::pipeline::PipelineConfig;
use spatial_frontend::sacc::{sacc_backward, sacc_forward, SaccLoss, SaccParams, SaccTrainConfig};
use spatial_frontend::scene::{speech_like, RoomScene};
use spatial_frontend::signal::wav::{write_wav, WavEncoding};
use spatial_frontend::signal::WaveformBuffer;

pub fn random_tensor(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.gen_range(-1.5..1.5))
}

pub fn random_params(f: usize, k: usize, rng: &mut ChaCha8Rng) -> SaccParams {
    let mut p = SaccParams::init(f, k, rng.gen()).unwrap();
    p.bq.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    p.bk.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    p.bv = rng.gen_range(-0.3..0.3);
    p
}

/// Scalar loss `sum(G * Y)` so that dL/dY = G.
fn probe_loss(x: &Array3<f64>, p: &SaccParams, g: &Array2<f64>) -> f64 {
    (&sacc_forward(x, p).unwrap().y * g).sum()
}

fn tensor_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    // tensors with identically zero gradient compare absolutely against FD rounding noise
    if scale < 1e-6 {
        diff
    } else {
        diff / scale
    }
}

/// Max over the six parameter tensors of the relative gradient error.
pub fn finite_difference_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, m, f, k) = (4, 3, 8, 5);
    let x = random_tensor((t, m, f), &mut rng);
    let p = random_params(f, k, &mut rng);
    let g = Array2::from_shape_simple_fn((t, f), || rng.gen_range(-1.0..1.0));
    let out = sacc_forward(&x, &p).unwrap();
    let grad = sacc_backward(&out, &x, &p, &g).unwrap().to_vec();
    let base = p.to_vec();
    let h = 1e-5;
    let numeric: Vec<f64> = (0..base.len())
        .map(|i| {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let lp = probe_loss(&x, &from_vec(&plus, f, k), &g);
            let lm = probe_loss(&x, &from_vec(&minus, f, k), &g);
            (lp - lm) / (2.0 * h)
        })
        .collect();
    let sizes = [f * k, k, f * k, k, f, 1];
    let mut offset = 0;
    let mut worst: f64 = 0.0;
    for n in sizes {
        let e = tensor_rel_error(&grad[offset..offset + n], &numeric[offset..offset + n]);
        worst = worst.max(e);
        offset += n;
    }
    worst
}

pub fn from_vec(v: &[f64], f: usize, k: usize) -> SaccParams {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"SACC");
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.extend_from_slice(&(f as u64).to_le_bytes());
    bytes.extend_from_slice(&(k as u64).to_le_bytes());
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    SaccParams::from_bytes(&bytes).unwrap()
}

pub fn sfe(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sfe"))
        .args(args)
        .env("SFE_THREADS", "1")
        .output()
        .expect("spawn sfe")
}

pub fn ok(args: &[&str]) {
    let out = sfe(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

pub fn code(args: &[&str]) -> i32 {
    sfe(args).status.code().expect("exit code")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn scene(azimuth: f64, seed: u64) -> RoomScene {
    RoomScene {
        azimuth_deg: azimuth,
        range_m: 1.5,
        t60_s: 0.35,
        ambient_snr_db: Some(15.0),
        white_snr_db: Some(45.0),
        gain_jitter_db: [0.1, 2.0],
        output_dbfs: -6.0,
        seed,
        room_volume_m3: 60.0,
    }
}

/// Writes a clean recording and `n` scene files, returning their paths.
pub fn setup(dir: &Path, n: usize) -> (PathBuf, Vec<PathBuf>) {
    let clean = dir.join("clean_in.wav");
    write_wav(&clean, &WaveformBuffer::mono(speech_like(1.0, 16_000, 4), 16_000).unwrap(), WavEncoding::Float32).unwrap();
    let scenes = (0..n)
        .map(|i| {
            let p = dir.join(format!("scene{i}.json"));
            fs::write(&p, serde_json::to_string(&scene(20.0 + 40.0 * i as f64, i as u64)).unwrap()).unwrap();
            p
        })
        .collect();
    (clean, scenes)
}

pub fn simulate_all(dir: &Path, clean: &Path, scenes: &[PathBuf]) -> Vec<PathBuf> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, sc)| {
            let out = dir.join(format!("sim{i}"));
            ok(&["simulate", "--scene", s(sc), "--clean", s(clean), "--out", s(&out)]);
            out
        })
        .collect()
}

pub fn write_manifest(dir: &Path, sims: &[PathBuf]) -> PathBuf {
    let mut pipeline = PipelineConfig::preset("fmbu-sacc", Some("unused.bin".into())).unwrap();
    pipeline.seed = 1;
    let train = SaccTrainConfig {
        learning_rate: 0.01,
        epochs: 2,
        batch_size: 2,
        seed: 5,
        attention_dim: 4,
        loss: SaccLoss::Mse,
    };
    let manifest = serde_json::json!({
        "pipeline": serde_json::from_str::<serde_json::Value>(&pipeline.to_json().unwrap()).unwrap(),
        "train": train,
        "scenes": sims.iter().map(|d| d.strip_prefix(dir).unwrap_or(d).join("sidecar.json")).collect::<Vec<_>>(),
    });
    let p = dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    p
}

pub fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

/// Runs the whole command chain in `dir`, returning every artifact.
pub fn full_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let (clean, scenes) = setup(dir, 2);
    let sims = simulate_all(dir, &clean, &scenes);
    let manifest = write_manifest(dir, &sims);
    let params = dir.join("params.bin");
    ok(&["train-sacc", "--manifest", s(&manifest), "--out", s(&params)]);
    ok(&["design-beams", "--model", "fmbu", "--out", s(&dir.join("beams.json")), "--beampattern", s(&dir.join("bp.csv"))]);
    let processed = dir.join("out.wav");
    let mixture = sims[0].join("mixture.wav");
    ok(&["process", "--preset", "fmbu-sacc", "--sacc-params", s(&params), "--in", s(&mixture), "--out", s(&processed), "--dump-stages"]);
    ok(&["localize", "--weights", s(&dir.join("out.weights.csv")), "--beams", s(&dir.join("beams.json")), "--out", s(&dir.join("loc.json"))]);
    ok(&[
        "report", "--processed", s(&processed), "--sidecar", s(&sims[0].join("sidecar.json")),
        "--out", s(&dir.join("report.json")), "--localization", s(&dir.join("loc.json")),
    ]);
    let sdm = dir.join("sdm.wav");
    ok(&["process", "--preset", "sdm", "--in", s(&mixture), "--out", s(&sdm), "--encoding", "pcm16"]);
    let mut all = files_in(dir);
    for (i, sim) in sims.iter().enumerate() {
        all.extend(files_in(sim).into_iter().map(|(n, b)| (format!("sim{i}/{n}"), b)));
    }
    all
}

