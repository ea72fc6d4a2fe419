//! The conditional noise predictor `ε_θ(x_t, t, c)`: a four-layer SiLU MLP over
//! `[x_t | time embedding | condition]`, with a hand-written reverse pass,
//! Adam, and a JSON checkpoint container.

use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoisePredictor, ScheduleSpec};
use crate::error::{Error, Result};
use crate::rng::SeedStream;

pub const TIME_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub data_dim: usize,
    pub time_dim: usize,
    pub cond_width: usize,
    pub hidden: usize,
    /// `T`; the time embedding is a function of `t / T`.
    pub time_scale: usize,
}

impl Arch {
    pub fn new(data_dim: usize, cond_width: usize, time_scale: usize) -> Self {
        Self {
            data_dim,
            time_dim: TIME_EMBED_DIM,
            cond_width,
            hidden: DEFAULT_HIDDEN,
            time_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_dim + self.cond_width
    }

    fn layer_dims(&self) -> [(usize, usize); 4] {
        let h = self.hidden;
        [(self.input_dim(), h), (h, h), (h, h), (h, self.data_dim)]
    }
}

/// Sinusoidal features of `t / T` at geometric frequencies `2^k`, `k = 0..dim/2`:
/// `[sin(2^0 τ), cos(2^0 τ), sin(2^1 τ), ...]`.
pub fn time_embedding(t: usize, time_scale: usize, dim: usize) -> Vec<f64> {
    let tau = t as f64 / time_scale as f64;
    (0..dim / 2)
        .flat_map(|k| {
            let a = (1u64 << k) as f64 * tau;
            [a.sin(), a.cos()]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(fan_in, fan_out)`, so a batch maps as `X·W + b`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Weights of all layers. The same layout stores gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub layers: Vec<Layer>,
}

pub type DenoiserParams = Tensors;
pub type GradientBundle = Tensors;

impl Tensors {
    pub fn zeros(arch: &Arch) -> Self {
        Self {
            layers: arch
                .layer_dims()
                .iter()
                .map(|&(i, o)| Layer {
                    w: Array2::zeros((i, o)),
                    b: Array1::zeros(o),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    /// Named row-major views, in a fixed order.
    pub fn slices(&self) -> Vec<(String, &[f64])> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("layer{i}.weight"),
                        l.w.as_slice().expect("standard layout"),
                    ),
                    (
                        format!("layer{i}.bias"),
                        l.b.as_slice().expect("standard layout"),
                    ),
                ]
            })
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w.as_slice_mut().expect("standard layout"),
                    l.b.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinate `i` of the flattened parameter vector.
    pub fn get(&self, mut i: usize) -> f64 {
        for (_, s) in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("coordinate out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = v;
                return;
            }
            i -= s.len();
        }
        panic!("coordinate out of range")
    }

    pub fn add_scaled(&mut self, other: &Tensors, k: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(k, &b.w);
            a.b.scaled_add(k, &b.b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.w *= k;
            l.b *= k;
        }
    }

    pub fn dot(&self, other: &Tensors) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| (&a.w * &b.w).sum() + a.b.dot(&b.b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }

    pub fn shapes_match(&self, other: &Tensors) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w.dim() == b.w.dim() && a.b.dim() == b.b.dim())
    }
}

/// Fan-in scaled uniform weights `U(−√(6/fan_in), √(6/fan_in))`, zero biases,
/// and a zero output layer so the untrained network predicts `ε̂ = 0`.
pub fn init_params(arch: &Arch, seed: u64) -> DenoiserParams {
    let mut rng = SeedStream::new(seed).child("init").rng();
    let mut p = Tensors::zeros(arch);
    let last = p.layers.len() - 1;
    for l in &mut p.layers[..last] {
        let bound = (6.0 / l.w.nrows() as f64).sqrt();
        l.w.mapv_inplace(|_| (2.0 * rng.random::<f64>() - 1.0) * bound);
    }
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Intermediate values kept by [`Denoiser::forward_tape`] for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.inputs[0].nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub arch: Arch,
    pub params: DenoiserParams,
}

impl Denoiser {
    pub fn new(arch: Arch, seed: u64) -> Self {
        Self {
            params: init_params(&arch, seed),
            arch,
        }
    }

    fn assemble_input(
        &self,
        x_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let a = &self.arch;
        let b = x_t.nrows();
        if x_t.ncols() != a.data_dim {
            return Err(Error::DimensionMismatch {
                expected: a.data_dim,
                got: x_t.ncols(),
            });
        }
        if cond.ncols() != a.cond_width {
            return Err(Error::DimensionMismatch {
                expected: a.cond_width,
                got: cond.ncols(),
            });
        }
        if cond.nrows() != b || t.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: cond.nrows().min(t.len()),
            });
        }
        let mut temb = Array2::zeros((b, a.time_dim));
        for (mut row, &ti) in temb.rows_mut().into_iter().zip(t) {
            row.assign(&Array1::from(time_embedding(ti, a.time_scale, a.time_dim)));
        }
        Ok(concatenate(Axis(1), &[x_t, temb.view(), cond]).expect("matching rows"))
    }

    /// Batched forward pass, keeping the tape.
    pub fn forward_tape(
        &self,
        x_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Tape)> {
        let mut h = self.assemble_input(x_t, t, cond)?;
        let n = self.params.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n - 1);
        for (i, l) in self.params.layers.iter().enumerate() {
            let a = h.dot(&l.w) + &l.b;
            inputs.push(h);
            if i + 1 == n {
                return Ok((a, Tape { inputs, pre }));
            }
            h = a.mapv(silu);
            pre.push(a);
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward(
        &self,
        x_t: ArrayView2<f64>,
        t: &[usize],
        cond: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_tape(x_t, t, cond)?.0)
    }

    /// Single-sample forward pass.
    pub fn forward_one(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x_t.len()), x_t).expect("row view");
        let c = ArrayView2::from_shape((1, cond.len()), cond).expect("row view");
        Ok(self.forward(x, &[t], c)?.row(0).to_vec())
    }

    /// Exact gradient of `Σ_rows adjoint · ε̂` with respect to every parameter.
    pub fn backward(&self, tape: &Tape, adjoint: ArrayView2<f64>) -> GradientBundle {
        let n = self.params.layers.len();
        let mut grads = self.params.zeros_like();
        let mut delta = adjoint.to_owned();
        for i in (0..n).rev() {
            let g = &mut grads.layers[i];
            g.w = tape.inputs[i].t().dot(&delta);
            g.b = delta.sum_axis(Axis(0));
            if i == 0 {
                break;
            }
            let mut up = delta.dot(&self.params.layers[i].w.t());
            Zip::from(&mut up)
                .and(&tape.pre[i - 1])
                .for_each(|d, &a| *d *= silu_grad(a));
            delta = up;
        }
        grads
    }
}

impl NoisePredictor for Denoiser {
    fn data_dim(&self) -> usize {
        self.arch.data_dim
    }

    fn predict(&self, x_t: ArrayView2<f64>, t: &[usize], cond: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x_t, t, cond)
            .expect("shapes checked by caller")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensors,
    pub v: Tensors,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Tensors) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut Tensors, grads: &Tensors, state: &mut AdamState, cfg: &AdamConfig) {
    assert!(
        params.shapes_match(grads),
        "gradient shapes differ from parameters"
    );
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = *cfg;
    let gs = grads.slices();
    for (((p, (_, g)), m), v) in params
        .slices_mut()
        .into_iter()
        .zip(gs)
        .zip(state.m.slices_mut())
        .zip(state.v.slices_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

pub const CHECKPOINT_FORMAT: &str = "cpolab-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus the schedule it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleSpec,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    arch: Arch,
    schedule: ScheduleSpec,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let p = &self.model.params;
        let tensors = p
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    TensorRecord {
                        name: format!("layer{i}.weight"),
                        shape: l.w.shape().to_vec(),
                        data: l.w.iter().copied().collect(),
                    },
                    TensorRecord {
                        name: format!("layer{i}.bias"),
                        shape: l.b.shape().to_vec(),
                        data: l.b.to_vec(),
                    },
                ]
            })
            .collect();
        serde_json::to_string(&CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            arch: self.model.arch,
            schedule: self.schedule,
            tensors,
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s)?;
        if f.format != CHECKPOINT_FORMAT || f.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported container {} v{}",
                f.format, f.version
            )));
        }
        let mut params = Tensors::zeros(&f.arch);
        if f.tensors.len() != 2 * params.layers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                2 * params.layers.len(),
                f.tensors.len()
            )));
        }
        for (i, l) in params.layers.iter_mut().enumerate() {
            let (w, b) = (&f.tensors[2 * i], &f.tensors[2 * i + 1]);
            if w.shape != l.w.shape() || b.shape != l.b.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch in layer {i}: {:?}/{:?}",
                    w.shape, b.shape
                )));
            }
            l.w = Array2::from_shape_vec(l.w.raw_dim(), w.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            l.b = Array1::from(b.data.clone());
            if l.b.len() != b.shape[0] {
                return Err(Error::Checkpoint(format!(
                    "bias length mismatch in layer {i}"
                )));
            }
        }
        Ok(Self {
            model: Denoiser {
                arch: f.arch,
                params,
            },
            schedule: f.schedule,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Copy of `rows` with each row drawn from `src` at the given indices.
pub(crate) fn gather_rows(src: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), src.ncols()));
    for (mut o, &r) in out.rows_mut().into_iter().zip(rows) {
        o.assign(&src.slice(s![r, ..]));
    }
    out
}
