//! Fixed MVDR beamformer design for a uniform linear array.
//!
//! Weights follow the distortionless minimum-variance solution against a
//! diagonally loaded noise coherence model:
//!
//! ```text
//! w(f) = (Phi + s I)^-1 v(f) / (v(f)^H (Phi + s I)^-1 v(f))
//! ```
//!
//! With `Phi = I` (uncorrelated sensor noise) this reduces to delay-and-sum,
//! `w = v / M`. With the spherically isotropic coherence
//! `Phi_ij = sinc(2 pi f |i - j| d / c)` it yields the superdirective design.
//!
//! Azimuth convention: 0 deg is endfire towards mic 0, 90 deg is broadside; mic
//! `m` sits at `m * d` on the array axis and mic 0 is the phase reference.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Spectrogram;

pub const DEFAULT_NUM_BEAMS: usize = 16;
pub const DEFAULT_DIAGONAL_LOADING: f64 = 0.01;
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Largest eigenvalue spread accepted for the loaded noise model.
const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub num_mics: usize,
    pub spacing_m: f64,
    #[serde(default = "default_speed_of_sound")]
    pub speed_of_sound: f64,
}

fn default_speed_of_sound() -> f64 {
    SPEED_OF_SOUND
}

impl Default for ArrayGeometry {
    /// Eight microphones at 33 mm.
    fn default() -> Self {
        Self {
            num_mics: 8,
            spacing_m: 0.033,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }
}

impl ArrayGeometry {
    pub fn new(num_mics: usize, spacing_m: f64, speed_of_sound: f64) -> Result<Self> {
        let g = Self {
            num_mics,
            spacing_m,
            speed_of_sound,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_mics == 0 {
            return Err(Error::Config("array needs at least one microphone".into()));
        }
        if !(self.spacing_m > 0.0 && self.spacing_m.is_finite()) {
            return Err(Error::Config(format!("invalid mic spacing {}", self.spacing_m)));
        }
        if !(self.speed_of_sound > 0.0 && self.speed_of_sound.is_finite()) {
            return Err(Error::Config(format!(
                "invalid speed of sound {}",
                self.speed_of_sound
            )));
        }
        Ok(())
    }

    /// Plane-wave arrival delay at mic `m` relative to mic 0, in seconds.
    pub fn relative_delay(&self, m: usize, azimuth_deg: f64) -> f64 {
        m as f64 * self.spacing_m * azimuth_deg.to_radians().cos() / self.speed_of_sound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Spatially white sensor noise (FMBu).
    #[serde(alias = "fmbu")]
    Uncorrelated,
    /// Spherically isotropic diffuse field (FMBi).
    #[serde(alias = "fmbi", alias = "isotropic")]
    SphericallyIsotropic,
}

impl std::str::FromStr for NoiseModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmbu" | "uncorrelated" => Ok(NoiseModel::Uncorrelated),
            "fmbi" | "isotropic" | "spherically_isotropic" => Ok(NoiseModel::SphericallyIsotropic),
            other => Err(Error::Config(format!("unknown noise model '{other}'"))),
        }
    }
}

/// Unnormalized sinc, sin(x)/x.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

pub fn steering_vector(geom: &ArrayGeometry, azimuth_deg: f64, freq_hz: f64) -> Vec<Complex64> {
    (0..geom.num_mics)
        .map(|m| {
            let phase = -2.0 * PI * freq_hz * geom.relative_delay(m, azimuth_deg);
            Complex64::from_polar(1.0, phase)
        })
        .collect()
}

/// Noise coherence matrix; real symmetric with unit diagonal for both models.
pub fn coherence_matrix(geom: &ArrayGeometry, freq_hz: f64, model: NoiseModel) -> DMatrix<f64> {
    let m = geom.num_mics;
    match model {
        NoiseModel::Uncorrelated => DMatrix::identity(m, m),
        NoiseModel::SphericallyIsotropic => DMatrix::from_fn(m, m, |i, j| {
            let dist = i.abs_diff(j) as f64 * geom.spacing_m;
            sinc(2.0 * PI * freq_hz * dist / geom.speed_of_sound)
        }),
    }
}

/// MVDR weights for one look direction on every frequency of `freqs_hz` (F × M).
pub fn design_mvdr(
    geom: &ArrayGeometry,
    look_deg: f64,
    model: NoiseModel,
    loading: f64,
    freqs_hz: &[f64],
) -> Result<Array2<Complex64>> {
    geom.validate()?;
    let m = geom.num_mics;
    let mut weights = Array2::zeros((freqs_hz.len(), m));
    for (bin, &f) in freqs_hz.iter().enumerate() {
        let phi = coherence_matrix(geom, f, model) + DMatrix::identity(m, m) * loading;
        let eig = SymmetricEigen::new(phi.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > 0.0 && max / min <= MAX_CONDITION) {
            return Err(Error::SingularBin { bin });
        }
        let chol = phi.cholesky().ok_or(Error::SingularBin { bin })?;
        let v = steering_vector(geom, look_deg, f);
        let re = chol.solve(&DVector::from_iterator(m, v.iter().map(|c| c.re)));
        let im = chol.solve(&DVector::from_iterator(m, v.iter().map(|c| c.im)));
        let a: Vec<Complex64> = (0..m).map(|i| Complex64::new(re[i], im[i])).collect();
        let denom: Complex64 = v.iter().zip(&a).map(|(vi, ai)| vi.conj() * ai).sum();
        for i in 0..m {
            weights[[bin, i]] = a[i] / denom.conj();
        }
    }
    Ok(weights)
}

/// Look directions `(k + 0.5) * 180 / n` degrees.
pub fn beam_grid(num_beams: usize) -> Vec<f64> {
    (0..num_beams)
        .map(|k| (k as f64 + 0.5) * 180.0 / num_beams as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamSet {
    pub look_azimuths_deg: Vec<f64>,
    /// Beams × bins × mics.
    pub weights: Array3<Complex64>,
    pub diagonal_loading: f64,
    pub noise_model: NoiseModel,
    pub geometry: ArrayGeometry,
    pub frequencies_hz: Vec<f64>,
}

impl BeamSet {
    pub fn num_beams(&self) -> usize {
        self.look_azimuths_deg.len()
    }

    pub fn beam(&self, b: usize) -> ArrayView2<'_, Complex64> {
        self.weights.index_axis(ndarray::Axis(0), b)
    }

    /// Angular distance between neighbouring look directions.
    pub fn beam_width_deg(&self) -> f64 {
        180.0 / self.num_beams() as f64
    }

    /// Largest |w^H v(look) - 1| over all beams and bins.
    pub fn max_distortion_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (b, &look) in self.look_azimuths_deg.iter().enumerate() {
            for (k, &f) in self.frequencies_hz.iter().enumerate() {
                let v = steering_vector(&self.geometry, look, f);
                let resp: Complex64 = (0..self.geometry.num_mics)
                    .map(|i| self.weights[[b, k, i]].conj() * v[i])
                    .sum();
                worst = worst.max((resp - 1.0).norm());
            }
        }
        worst
    }
}

pub fn design_beamset(
    geom: &ArrayGeometry,
    model: NoiseModel,
    loading: f64,
    num_beams: usize,
    freqs_hz: &[f64],
) -> Result<BeamSet> {
    if num_beams == 0 {
        return Err(Error::Config("need at least one beam".into()));
    }
    let looks = beam_grid(num_beams);
    let mut weights = Array3::zeros((num_beams, freqs_hz.len(), geom.num_mics));
    for (b, &look) in looks.iter().enumerate() {
        let w = design_mvdr(geom, look, model, loading, freqs_hz)?;
        weights.index_axis_mut(ndarray::Axis(0), b).assign(&w);
    }
    Ok(BeamSet {
        look_azimuths_deg: looks,
        weights,
        diagonal_loading: loading,
        noise_model: model,
        geometry: *geom,
        frequencies_hz: freqs_hz.to_vec(),
    })
}

/// Filter-and-sum every beam: output channel b is `w_b(f)^H y(t, f)`.
pub fn apply_beamset(spec: &Spectrogram, beams: &BeamSet) -> Result<Spectrogram> {
    let (frames, mics, bins) = spec.data.dim();
    if mics != beams.geometry.num_mics {
        return Err(Error::Shape(format!(
            "spectrogram has {mics} channels, beam set expects {}",
            beams.geometry.num_mics
        )));
    }
    let grid = spec.bin_frequencies();
    let grid_matches = grid.len() == beams.frequencies_hz.len()
        && grid
            .iter()
            .zip(&beams.frequencies_hz)
            .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0));
    if !grid_matches {
        return Err(Error::Shape(format!(
            "beam set designed for {} bins does not match the {bins}-bin STFT grid",
            beams.frequencies_hz.len()
        )));
    }
    let nb = beams.num_beams();
    let mut out = Array3::zeros((frames, nb, bins));
    for t in 0..frames {
        for b in 0..nb {
            for k in 0..bins {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..mics {
                    acc += beams.weights[[b, k, m]].conj() * spec.data[[t, m, k]];
                }
                out[[t, b, k]] = acc;
            }
        }
    }
    Ok(spec.with_data(out))
}

/// Gain in dB, azimuths × frequencies, of one beam's weights (F × M).
pub fn beampattern(
    weights: ArrayView2<'_, Complex64>,
    geom: &ArrayGeometry,
    azimuths_deg: &[f64],
    freqs_hz: &[f64],
) -> Result<Array2<f64>> {
    if azimuths_deg.is_empty() || freqs_hz.is_empty() {
        return Err(Error::Config("beampattern grids must be non-empty".into()));
    }
    if weights.nrows() != freqs_hz.len() || weights.ncols() != geom.num_mics {
        return Err(Error::Shape(format!(
            "weights are {:?}, expected [{}, {}]",
            weights.dim(),
            freqs_hz.len(),
            geom.num_mics
        )));
    }
    let mut gains = Array2::zeros((azimuths_deg.len(), freqs_hz.len()));
    for (i, &az) in azimuths_deg.iter().enumerate() {
        for (k, &f) in freqs_hz.iter().enumerate() {
            let v = steering_vector(geom, az, f);
            let resp: Complex64 = weights.row(k).iter().zip(&v).map(|(w, vi)| w.conj() * vi).sum();
            gains[[i, k]] = 20.0 * resp.norm().max(1e-15).log10();
        }
    }
    Ok(gains)
}

/// Output power `w^H Phi w` of a weight vector under a noise model.
pub fn noise_output_power(
    w: &[Complex64],
    geom: &ArrayGeometry,
    freq_hz: f64,
    model: NoiseModel,
) -> f64 {
    let phi = coherence_matrix(geom, freq_hz, model);
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..w.len() {
        for j in 0..w.len() {
            acc += w[i].conj() * phi[(i, j)] * w[j];
        }
    }
    acc.re
}

/// White-noise gain of a distortionless beam, `-10 log10(w^H w)` dB.
pub fn white_noise_gain_db(w: &[Complex64]) -> f64 {
    -10.0 * w.iter().map(|c| c.norm_sqr()).sum::<f64>().log10()
}

#[derive(Serialize, Deserialize)]
struct BeamSetFile {
    format: String,
    version: u32,
    geometry: ArrayGeometry,
    noise_model: NoiseModel,
    diagonal_loading: f64,
    look_azimuths_deg: Vec<f64>,
    frequencies_hz: Vec<f64>,
    /// [beam][bin] -> interleaved re/im per microphone.
    weights: Vec<Vec<Vec<f64>>>,
}

const BEAMSET_FORMAT: &str = "beamset";
const BEAMSET_VERSION: u32 = 1;

impl BeamSet {
    pub fn to_json(&self) -> Result<String> {
        let (nb, nf, nm) = self.weights.dim();
        let weights = (0..nb)
            .map(|b| {
                (0..nf)
                    .map(|k| {
                        (0..nm)
                            .flat_map(|m| {
                                let c = self.weights[[b, k, m]];
                                [c.re, c.im]
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let file = BeamSetFile {
            format: BEAMSET_FORMAT.into(),
            version: BEAMSET_VERSION,
            geometry: self.geometry,
            noise_model: self.noise_model,
            diagonal_loading: self.diagonal_loading,
            look_azimuths_deg: self.look_azimuths_deg.clone(),
            frequencies_hz: self.frequencies_hz.clone(),
            weights,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BeamSetFile = serde_json::from_str(text)?;
        if file.format != BEAMSET_FORMAT || file.version != BEAMSET_VERSION {
            return Err(Error::Config(format!(
                "unsupported beam set file {} v{}",
                file.format, file.version
            )));
        }
        file.geometry.validate()?;
        let nb = file.look_azimuths_deg.len();
        let nf = file.frequencies_hz.len();
        let nm = file.geometry.num_mics;
        if file.weights.len() != nb
            || file
                .weights
                .iter()
                .any(|b| b.len() != nf || b.iter().any(|row| row.len() != 2 * nm))
        {
            return Err(Error::Shape("beam set weights do not match header".into()));
        }
        let weights = Array3::from_shape_fn((nb, nf, nm), |(b, k, m)| {
            Complex64::new(file.weights[b][k][2 * m], file.weights[b][k][2 * m + 1])
        });
        Ok(Self {
            look_azimuths_deg: file.look_azimuths_deg,
            weights,
            diagonal_loading: file.diagonal_loading,
            noise_model: file.noise_model,
            geometry: file.geometry,
            frequencies_hz: file.frequencies_hz,
        })
    }
}

/// CSV with one row per azimuth and one column per frequency.
pub fn beampattern_csv(gains: &Array2<f64>, azimuths_deg: &[f64], freqs_hz: &[f64]) -> String {
    let mut out = String::from("azimuth_deg");
    for f in freqs_hz {
        let _ = write!(out, ",{f}");
    }
    out.push('\n');
    for (i, az) in azimuths_deg.iter().enumerate() {
        let _ = write!(out, "{az}");
        for k in 0..freqs_hz.len() {
            let _ = write!(out, ",{}", gains[[i, k]]);
        }
        out.push('\n');
    }
    out
}
