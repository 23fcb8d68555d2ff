//! Self-attention channel combinator.
//!
//! Per frame `t`, with `X_t` the `M x F` normalized log-power plane:
//!
//! ```text
//! Q = X Wq + bq,  K = X Wk + bk,  V = X wv + bv
//! A = rowsoftmax(Q K^T / sqrt(K)),  W = softmax(A V),  Y = sum_m W_m X_m
//! ```
//!
//! The weights are shared by all frequency bins. Training minimizes the
//! mean squared error between `Y` and the clean reference plane.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::BeamSet;
use crate::error::{Error, Result};

pub const DEFAULT_ATTENTION_DIM: usize = 32;
const MAGIC: &[u8; 4] = b"SACC";
const FORMAT_VERSION: u32 = 1;
/// Floor applied to profile entries before taking logs in the flatness.
const FLATNESS_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SaccParams {
    /// `F x K`
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    /// `F x K`
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    /// `F`
    pub wv: Array1<f64>,
    pub bv: f64,
}

impl SaccParams {
    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn init(num_bins: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_bins == 0 || dim == 0 {
            return Err(Error::Config("SACC needs at least one bin and K >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
        };
        let wq = glorot(num_bins, dim);
        let wk = glorot(num_bins, dim);
        let wv = glorot(num_bins, 1).remove_axis(Axis(1));
        Ok(Self {
            wq,
            bq: Array1::zeros(dim),
            wk,
            bk: Array1::zeros(dim),
            wv,
            bv: 0.0,
        })
    }

    pub fn zeros(num_bins: usize, dim: usize) -> Self {
        Self {
            wq: Array2::zeros((num_bins, dim)),
            bq: Array1::zeros(dim),
            wk: Array2::zeros((num_bins, dim)),
            bk: Array1::zeros(dim),
            wv: Array1::zeros(num_bins),
            bv: 0.0,
        }
    }

    pub fn num_bins(&self) -> usize {
        self.wq.nrows()
    }

    pub fn attention_dim(&self) -> usize {
        self.wq.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (f, k) = self.wq.dim();
        if k == 0 || f == 0 {
            return Err(Error::Config("SACC parameters are empty".into()));
        }
        if self.wk.dim() != (f, k) || self.bq.len() != k || self.bk.len() != k || self.wv.len() != f {
            return Err(Error::Shape("inconsistent SACC parameter shapes".into()));
        }
        if !self.values().all(f64::is_finite) {
            return Err(Error::Degenerate("non-finite SACC parameter".into()));
        }
        Ok(())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.wq
            .iter()
            .chain(self.bq.iter())
            .chain(self.wk.iter())
            .chain(self.bk.iter())
            .chain(self.wv.iter())
            .chain(std::iter::once(&self.bv))
            .copied()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.wq
            .iter_mut()
            .chain(self.bq.iter_mut())
            .chain(self.wk.iter_mut())
            .chain(self.bk.iter_mut())
            .chain(self.wv.iter_mut())
            .chain(std::iter::once(&mut self.bv))
    }

    pub fn num_values(&self) -> usize {
        2 * self.wq.len() + 2 * self.bq.len() + self.wv.len() + 1
    }

    /// Flat copy in serialization order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.values().collect()
    }

    /// Binary layout: `"SACC"`, u32 version, u64 F, u64 K, then
    /// `wq, bq, wk, bk, wv, bv` as little-endian f64, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.num_bins() as u64).to_le_bytes());
        out.extend_from_slice(&(self.attention_dim() as u64).to_le_bytes());
        for v in self.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("SACC parameter file: {msg}"));
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let f = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let k = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        if f == 0 || k == 0 {
            return Err(bad("zero dimension"));
        }
        let mut params = Self::zeros(f, k);
        let body = &bytes[24..];
        if body.len() != 8 * params.num_values() {
            return Err(bad("length does not match header"));
        }
        for (dst, chunk) in params.values_mut().zip(body.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Forward result with the intermediates needed by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SaccOutput {
    /// `T x F`
    pub y: Array2<f64>,
    /// `T x M`
    pub w: Array2<f64>,
    /// `T x M x M`
    pub a: Array3<f64>,
    /// `T x M x K`
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    /// `T x M`
    pub v: Array2<f64>,
}

fn softmax_in_place<'a>(x: impl IntoIterator<Item = &'a mut f64>) {
    let mut x: Vec<&mut f64> = x.into_iter().collect();
    let max = x.iter().map(|v| **v).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        **v = (**v - max).exp();
        sum += **v;
    }
    for v in x.iter_mut() {
        **v /= sum;
    }
}

fn check_input(x: &Array3<f64>, params: &SaccParams) -> Result<()> {
    let (t, m, f) = x.dim();
    if f != params.num_bins() {
        return Err(Error::Shape(format!(
            "input has {f} bins, SACC parameters expect {}",
            params.num_bins()
        )));
    }
    if t == 0 || m == 0 {
        return Err(Error::Shape("SACC input needs at least one frame and channel".into()));
    }
    Ok(())
}

fn flat(x: &Array3<f64>) -> ArrayView2<'_, f64> {
    let (t, m, f) = x.dim();
    x.view()
        .into_shape_with_order((t * m, f))
        .expect("standard layout")
}

/// Forward pass on a `T x M x F` normalized log-power tensor.
pub fn sacc_forward(x: &Array3<f64>, params: &SaccParams) -> Result<SaccOutput> {
    check_input(x, params)?;
    let x = x.as_standard_layout().into_owned();
    let (t_len, m, f) = x.dim();
    let dim = params.attention_dim();
    let xf = flat(&x);
    let q = (xf.dot(&params.wq) + &params.bq)
        .into_shape_with_order((t_len, m, dim))
        .expect("sizes");
    let k = (xf.dot(&params.wk) + &params.bk)
        .into_shape_with_order((t_len, m, dim))
        .expect("sizes");
    let v = (xf.dot(&params.wv) + params.bv)
        .into_shape_with_order((t_len, m))
        .expect("sizes");
    let scale = 1.0 / (dim as f64).sqrt();

    let mut a = Array3::zeros((t_len, m, m));
    let mut w = Array2::zeros((t_len, m));
    let mut y = Array2::zeros((t_len, f));
    for t in 0..t_len {
        let qt = q.index_axis(Axis(0), t);
        let kt = k.index_axis(Axis(0), t);
        let mut at = qt.dot(&kt.t()) * scale;
        for mut row in at.rows_mut() {
            softmax_in_place(row.iter_mut());
        }
        let mut z = at.dot(&v.row(t)).to_vec();
        softmax_in_place(z.iter_mut());
        let xt = x.index_axis(Axis(0), t);
        y.row_mut(t).assign(&Array1::from(z.clone()).dot(&xt));
        w.row_mut(t).assign(&Array1::from(z));
        a.index_axis_mut(Axis(0), t).assign(&at);
    }
    Ok(SaccOutput { y, w, a, q, k, v })
}

/// Reverse-mode gradients with respect to every parameter tensor.
pub fn sacc_backward(
    out: &SaccOutput,
    x: &Array3<f64>,
    params: &SaccParams,
    grad_y: &Array2<f64>,
) -> Result<SaccParams> {
    check_input(x, params)?;
    let (t_len, m, f) = x.dim();
    let dim = params.attention_dim();
    if out.y.dim() != (t_len, f)
        || out.w.dim() != (t_len, m)
        || out.a.dim() != (t_len, m, m)
        || out.q.dim() != (t_len, m, dim)
        || out.k.dim() != (t_len, m, dim)
        || out.v.dim() != (t_len, m)
    {
        return Err(Error::Shape("SACC cache does not match input and parameters".into()));
    }
    if grad_y.dim() != (t_len, f) {
        return Err(Error::Shape(format!(
            "gradient is {:?}, expected ({t_len}, {f})",
            grad_y.dim()
        )));
    }
    let scale = 1.0 / (dim as f64).sqrt();
    let mut gq = Array3::<f64>::zeros((t_len, m, dim));
    let mut gk = Array3::<f64>::zeros((t_len, m, dim));
    let mut gv = Array2::<f64>::zeros((t_len, m));
    for t in 0..t_len {
        let xt = x.index_axis(Axis(0), t);
        let wt = out.w.row(t);
        let at = out.a.index_axis(Axis(0), t);
        let vt = out.v.row(t);
        let g_w = xt.dot(&grad_y.row(t));
        let mean = wt.dot(&g_w);
        let g_z = &wt * &(&g_w - mean);
        // Z = A V
        gv.row_mut(t).assign(&at.t().dot(&g_z));
        let mut g_s = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            let inner: f64 = (0..m).map(|j| at[[i, j]] * g_z[i] * vt[j]).sum();
            for j in 0..m {
                g_s[[i, j]] = at[[i, j]] * (g_z[i] * vt[j] - inner) * scale;
            }
        }
        let qt = out.q.index_axis(Axis(0), t);
        let kt = out.k.index_axis(Axis(0), t);
        gq.index_axis_mut(Axis(0), t).assign(&g_s.dot(&kt));
        gk.index_axis_mut(Axis(0), t).assign(&g_s.t().dot(&qt));
    }
    let x = x.as_standard_layout().into_owned();
    let xf = flat(&x);
    let gq = gq.into_shape_with_order((t_len * m, dim)).expect("sizes");
    let gk = gk.into_shape_with_order((t_len * m, dim)).expect("sizes");
    let gv = gv.into_shape_with_order(t_len * m).expect("sizes");
    Ok(SaccParams {
        wq: xf.t().dot(&gq),
        bq: gq.sum_axis(Axis(0)),
        wk: xf.t().dot(&gk),
        bk: gk.sum_axis(Axis(0)),
        wv: xf.t().dot(&gv),
        bv: gv.sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaccLoss {
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaccTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub attention_dim: usize,
    #[serde(default = "default_loss")]
    pub loss: SaccLoss,
}

fn default_dim() -> usize {
    DEFAULT_ATTENTION_DIM
}

fn default_loss() -> SaccLoss {
    SaccLoss::Mse
}

impl Default for SaccTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            attention_dim: DEFAULT_ATTENTION_DIM,
            loss: SaccLoss::Mse,
        }
    }
}

impl SaccTrainConfig {
    pub fn validate(&self) -> Result<()> {
        // zero is allowed: it freezes the parameters, which is useful as a baseline
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.attention_dim == 0 {
            return Err(Error::Config("attention_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// One training pair: `T x M x F` input and its `T x F` clean target.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingItem {
    pub input: Array3<f64>,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: SaccParams,
    /// Dataset loss before training followed by the loss after each epoch.
    pub loss_trace: Vec<f64>,
}

impl TrainOutcome {
    pub fn loss_trace_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Trace<'a> {
            loss: &'a [f64],
        }
        Ok(serde_json::to_string_pretty(&Trace { loss: &self.loss_trace })?)
    }
}

fn item_loss_and_grad(item: &TrainingItem, params: &SaccParams) -> Result<(f64, SaccParams)> {
    let out = sacc_forward(&item.input, params)?;
    let diff = &out.y - &item.target;
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad_y = diff * (2.0 / n);
    Ok((loss, sacc_backward(&out, &item.input, params, &grad_y)?))
}

fn dataset_loss(data: &[TrainingItem], params: &SaccParams) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|item| {
            let out = sacc_forward(&item.input, params)?;
            let diff = &out.y - &item.target;
            Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut SaccParams, grad: &SaccParams, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (i, (p, g)) in params.values_mut().zip(grad.values()).enumerate() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn accumulate(acc: &mut SaccParams, g: &SaccParams, scale: f64) {
    for (a, v) in acc.values_mut().zip(g.values()) {
        *a += scale * v;
    }
}

/// Mini-batch Adam on the mean squared error to the clean target.
///
/// Per-item gradients are computed in parallel and summed in item order,
/// so results do not depend on the thread count.
pub fn sacc_train(data: &[TrainingItem], cfg: &SaccTrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data
        .first()
        .ok_or_else(|| Error::Config("empty training set".into()))?;
    let (_, m, f) = first.input.dim();
    for (i, item) in data.iter().enumerate() {
        let (t, mi, fi) = item.input.dim();
        if mi != m || fi != f || item.target.dim() != (t, f) {
            return Err(Error::Shape(format!("training item {i} does not match item 0")));
        }
    }
    let mut params = SaccParams::init(f, cfg.attention_dim, cfg.seed)?;
    let mut adam = Adam::new(params.num_values());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = vec![dataset_loss(data, &params)?];
    if !trace[0].is_finite() {
        return Err(Error::Diverged { epoch: 0, trace });
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let grads: Vec<SaccParams> = batch
                .par_iter()
                .map(|&i| item_loss_and_grad(&data[i], &params).map(|(_, g)| g))
                .collect::<Result<_>>()?;
            let mut total = SaccParams::zeros(f, cfg.attention_dim);
            for g in &grads {
                accumulate(&mut total, g, 1.0 / batch.len() as f64);
            }
            if cfg.learning_rate > 0.0 {
                adam.update(&mut params, &total, cfg.learning_rate);
            }
        }
        let loss = dataset_loss(data, &params)?;
        trace.push(loss);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, trace });
        }
    }
    Ok(TrainOutcome {
        params,
        loss_trace: trace,
    })
}

/// Per-channel mean of the frame weights.
pub fn average_weights(w: &Array2<f64>) -> Result<Vec<f64>> {
    if w.nrows() == 0 {
        return Err(Error::Shape("weight matrix has no frames".into()));
    }
    Ok(w.mean_axis(Axis(0)).expect("non-empty").to_vec())
}

/// Geometric over arithmetic mean of the profile, in (0, 1].
pub fn flatness(profile: &[f64]) -> f64 {
    let n = profile.len() as f64;
    let arith = profile.iter().sum::<f64>() / n;
    let geo = (profile.iter().map(|p| p.max(FLATNESS_FLOOR).ln()).sum::<f64>() / n).exp();
    (geo / arith.max(FLATNESS_FLOOR)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub azimuth_deg: f64,
    pub beam_index: usize,
    pub flatness: f64,
    pub profile: Vec<f64>,
}

/// Look angle of the heaviest beam (lowest index on ties) and profile flatness.
pub fn localize(profile: &[f64], beams: &BeamSet) -> Result<Localization> {
    if profile.len() != beams.num_beams() {
        return Err(Error::Shape(format!(
            "profile has {} entries for {} beams",
            profile.len(),
            beams.num_beams()
        )));
    }
    let mut best = 0;
    for (i, p) in profile.iter().enumerate() {
        if *p > profile[best] {
            best = i;
        }
    }
    Ok(Localization {
        azimuth_deg: beams.look_azimuths_deg[best],
        beam_index: best,
        flatness: flatness(profile),
        profile: profile.to_vec(),
    })
}

impl Localization {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Weight matrix as CSV, one row per frame.
pub fn weights_csv(w: &Array2<f64>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..w.ncols()).map(|m| format!("ch{m}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in w.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
