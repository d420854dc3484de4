//! Per-pixel regression from (R, G, B, u, v) to surface slope.
//!
//! A small ReLU network trained with Adam on an L1 loss, and a nearest
//! neighbour lookup table used to cross-check it.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::raster::{GradientField, RasterImage, SegMask};
use crate::tactile_calib::{normalized_coord, GradientSample};

pub const INPUTS: usize = 5;
pub const OUTPUTS: usize = 2;

/// Samples per parallel work unit. Fixed so the reduction order never depends
/// on the thread count.
const CHUNK: usize = 256;

/// Training samples used to check that initial hidden units can fire.
const PROBE: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub hidden_sizes: Vec<usize>,
    /// Applied to the last hidden layer's activations.
    pub dropout_p: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![16, 64, 32, 8],
            dropout_p: 0.3,
            learning_rate: 3e-5,
            max_epochs: 120,
            early_stop_patience: 10,
            batch_size: 256,
            validation_fraction: 0.15,
            seed: 42,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.is_empty() || self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidInput(
                "hidden layers must be non-empty".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidInput(format!(
                "dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidInput(
                "learning rate, batch size and epoch count must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidInput(
                "validation fraction outside [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// Overrides from `key=value` text; `hidden_sizes` is a comma list.
    pub fn apply_kv(&mut self, kv: &KeyValues) -> Result<()> {
        let mut c = self.clone();
        if let Some(raw) = kv.get("hidden_sizes") {
            c.hidden_sizes = raw
                .split(',')
                .map(|t| t.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("hidden_sizes: {e}")))?;
        }
        kv.read_into("dropout", &mut c.dropout_p)?;
        kv.read_into("learning_rate", &mut c.learning_rate)?;
        kv.read_into("max_epochs", &mut c.max_epochs)?;
        kv.read_into("patience", &mut c.early_stop_patience)?;
        kv.read_into("batch_size", &mut c.batch_size)?;
        kv.read_into("validation_fraction", &mut c.validation_fraction)?;
        kv.read_into("seed", &mut c.seed)?;
        c.validate()?;
        *self = c;
        Ok(())
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![INPUTS];
        d.extend(&self.hidden_sizes);
        d.push(OUTPUTS);
        d
    }
}

/// Dense layers stored flat: for each layer, an `out x in` row-major weight
/// block followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    dims: Vec<usize>,
    params: Vec<f64>,
}

impl MlpWeights {
    pub fn new(dims: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2
            || dims[0] != INPUTS
            || *dims.last().unwrap() != OUTPUTS
            || dims.contains(&0)
        {
            return Err(Error::InvalidInput(format!("bad layer sizes {dims:?}")));
        }
        let need: usize = dims.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        if params.len() != need {
            return Err(Error::InvalidInput(format!(
                "expected {need} parameters for {dims:?}, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite parameter".into()));
        }
        Ok(Self { dims, params })
    }

    /// Fan-in scaled uniform initialisation of weights and biases, both drawn
    /// from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. Random biases keep ReLU units
    /// alive on the all-positive inputs.
    pub fn init(cfg: &MlpConfig, seed: u64) -> Self {
        let dims = cfg.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for p in dims.windows(2) {
            let bound = 1.0 / (p[0] as f64).sqrt();
            params.extend((0..p[0] * p[1] + p[1]).map(|_| rng.random_range(-bound..bound)));
        }
        Self { dims, params }
    }

    /// [`init`](Self::init), then every hidden unit that is inactive on all of
    /// `probe` has its weights and bias redrawn, up to a fixed number of tries.
    /// Units that never fire receive no gradient and would stay dead.
    pub fn init_alive(cfg: &MlpConfig, seed: u64, probe: &[&GradientSample]) -> Self {
        let mut net = Self::init(cfg, seed);
        if probe.is_empty() {
            return net;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let n = net.dims.len() - 1;
        let mut acts: Vec<Vec<f64>> = probe.iter().map(|s| s.features().to_vec()).collect();
        let mut off = 0;
        for l in 0..n - 1 {
            let (i, o) = (net.dims[l], net.dims[l + 1]);
            let bound = 1.0 / (i as f64).sqrt();
            let eval = |params: &[f64], r: usize, a: &[f64]| {
                params[off + i * o + r]
                    + (0..i).map(|c| params[off + r * i + c] * a[c]).sum::<f64>()
            };
            for r in 0..o {
                for _ in 0..50 {
                    if acts.iter().any(|a| eval(&net.params, r, a) > 0.0) {
                        break;
                    }
                    for c in 0..i {
                        net.params[off + r * i + c] = rng.random_range(-bound..bound);
                    }
                    net.params[off + i * o + r] = rng.random_range(-bound..bound);
                }
            }
            acts = acts
                .iter()
                .map(|a| (0..o).map(|r| eval(&net.params, r, a).max(0.0)).collect())
                .collect();
            off += i * o + o;
        }
        net
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, &[f64], &[f64])> {
        let mut off = 0;
        self.dims.windows(2).map(move |p| {
            let (i, o) = (p[0], p[1]);
            let w = &self.params[off..off + i * o];
            let b = &self.params[off + i * o..off + i * o + o];
            off += i * o + o;
            (i, o, w, b)
        })
    }

    /// Activations of the last hidden layer (inference mode).
    pub fn last_hidden(&self, x: &[f64; INPUTS]) -> Vec<f64> {
        let mut a = x.to_vec();
        let n = self.dims.len() - 1;
        for (i, _, w, b) in self.layers().take(n - 1) {
            a = b
                .iter()
                .enumerate()
                .map(|(r, br)| {
                    let row = &w[r * i..(r + 1) * i];
                    (br + row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()).max(0.0)
                })
                .collect();
        }
        a
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, x: &[f64; INPUTS]) -> [f64; OUTPUTS] {
        let mut a = x.to_vec();
        let n = self.dims.len() - 1;
        for (l, (i, _, w, b)) in self.layers().enumerate() {
            let mut z = b.to_vec();
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &w[r * i..(r + 1) * i];
                *zr += row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>();
            }
            if l + 1 < n {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
        [a[0], a[1]]
    }

    /// `VTPW` magic, u32 layer count, per layer u32 inputs and outputs, then f32
    /// weights and biases layer by layer, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"VTPW".to_vec();
        out.extend((self.dims.len() as u32 - 1).to_le_bytes());
        for p in self.dims.windows(2) {
            out.extend((p[0] as u32).to_le_bytes());
            out.extend((p[1] as u32).to_le_bytes());
        }
        for &x in &self.params {
            out.extend((x as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let u32_at = |off: usize| -> std::result::Result<u32, String> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| "truncated header".to_string())
        };
        if bytes.get(0..4) != Some(b"VTPW") {
            return Err("missing VTPW magic".into());
        }
        let layers = u32_at(4)? as usize;
        if layers == 0 || layers > 64 {
            return Err(format!("implausible layer count {layers}"));
        }
        let mut dims = Vec::with_capacity(layers + 1);
        for l in 0..layers {
            let (i, o) = (u32_at(8 + 8 * l)? as usize, u32_at(12 + 8 * l)? as usize);
            if l == 0 {
                dims.push(i);
            } else if dims[l] != i {
                return Err(format!(
                    "layer {l} input {i} does not match previous output {}",
                    dims[l]
                ));
            }
            dims.push(o);
        }
        let start = 8 + 8 * layers;
        let payload = &bytes[start.min(bytes.len())..];
        let params: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if !payload.len().is_multiple_of(4) {
            return Err("payload not a whole number of f32 values".into());
        }
        Self::new(dims, params).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?).map_err(|reason| Error::CorruptData {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Scratch buffers for one forward/backward pass of a single sample.
struct Workspace {
    z: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(dims: &[usize]) -> Self {
        Self {
            z: dims.iter().map(|&d| vec![0.0; d]).collect(),
            a: dims.iter().map(|&d| vec![0.0; d]).collect(),
            delta: dims.iter().map(|&d| vec![0.0; d]).collect(),
        }
    }
}

/// Accumulates the L1 loss sum and its gradient (scaled by `scale`) for a
/// slice of samples. `dropout` carries `(p, rng)`; the mask is applied to the
/// last hidden layer's activations with inverted scaling.
fn accumulate(
    net: &MlpWeights,
    samples: &[&GradientSample],
    scale: f64,
    mut dropout: Option<(f64, ChaCha8Rng)>,
    grad: &mut [f64],
) -> f64 {
    let dims = &net.dims;
    let n = dims.len() - 1;
    let mut ws = Workspace::new(dims);
    let mut mask = vec![1.0; dims[n - 1]];
    let offsets: Vec<usize> = dims
        .windows(2)
        .scan(0, |off, p| {
            let o = *off;
            *off += p[0] * p[1] + p[1];
            Some(o)
        })
        .collect();
    let mut loss = 0.0;
    for s in samples {
        ws.a[0].copy_from_slice(&s.features());
        for l in 0..n {
            let (i, o, off) = (dims[l], dims[l + 1], offsets[l]);
            let w = &net.params[off..off + i * o];
            let b = &net.params[off + i * o..off + i * o + o];
            let (prev, rest) = ws.a.split_at_mut(l + 1);
            let input = &prev[l];
            for r in 0..o {
                let row = &w[r * i..(r + 1) * i];
                ws.z[l + 1][r] = b[r] + row.iter().zip(input).map(|(p, q)| p * q).sum::<f64>();
            }
            let out = &mut rest[0];
            if l + 1 < n {
                for (a, z) in out.iter_mut().zip(&ws.z[l + 1]) {
                    *a = z.max(0.0);
                }
                if l + 2 == n {
                    if let Some((p, rng)) = dropout.as_mut() {
                        let keep = 1.0 / (1.0 - *p);
                        for (m, x) in mask.iter_mut().zip(out.iter_mut()) {
                            *m = if rng.random::<f64>() < *p { 0.0 } else { keep };
                            *x *= *m;
                        }
                    }
                }
            } else {
                out.copy_from_slice(&ws.z[l + 1]);
            }
        }
        let label = s.label();
        for (k, y) in label.iter().enumerate() {
            let e = ws.a[n][k] - y;
            loss += e.abs();
            ws.delta[n][k] = if e > 0.0 {
                scale
            } else if e < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        for l in (0..n).rev() {
            let (i, o, off) = (dims[l], dims[l + 1], offsets[l]);
            let (d_lo, d_hi) = ws.delta.split_at_mut(l + 1);
            let d_out = &d_hi[0];
            let input = &ws.a[l];
            let w = &net.params[off..off + i * o];
            {
                let (gw, gb) = grad[off..off + i * o + o].split_at_mut(i * o);
                for r in 0..o {
                    let d = d_out[r];
                    if d == 0.0 {
                        continue;
                    }
                    gb[r] += d;
                    for (g, x) in gw[r * i..(r + 1) * i].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let d_in = &mut d_lo[l];
            d_in.iter_mut().for_each(|x| *x = 0.0);
            for r in 0..o {
                let d = d_out[r];
                if d == 0.0 {
                    continue;
                }
                for (acc, wv) in d_in.iter_mut().zip(&w[r * i..(r + 1) * i]) {
                    *acc += d * wv;
                }
            }
            let dropped = l + 1 == n && dropout.is_some();
            for c in 0..i {
                if ws.z[l][c] <= 0.0 {
                    d_in[c] = 0.0;
                } else if dropped {
                    d_in[c] *= mask[c];
                }
            }
        }
    }
    loss
}

/// Mean L1 loss over all label components and its exact gradient, without
/// dropout.
pub fn loss_and_gradient(net: &MlpWeights, samples: &[GradientSample]) -> (f64, Vec<f64>) {
    let refs: Vec<&GradientSample> = samples.iter().collect();
    let denom = (samples.len() * OUTPUTS).max(1) as f64;
    let mut grad = vec![0.0; net.params.len()];
    let loss = accumulate(net, &refs, 1.0 / denom, None, &mut grad);
    (loss / denom, grad)
}

/// Signs of every hidden pre-activation and output residual over `samples`.
/// The loss is smooth between two parameter vectors with equal patterns.
fn kink_pattern(net: &MlpWeights, samples: &[GradientSample]) -> Vec<bool> {
    let n = net.dims.len() - 1;
    let mut out = Vec::new();
    for s in samples {
        let mut a = s.features().to_vec();
        for (l, (i, _, w, b)) in net.layers().enumerate() {
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(r, bias)| {
                    bias + w[r * i..(r + 1) * i]
                        .iter()
                        .zip(&a)
                        .map(|(p, q)| p * q)
                        .sum::<f64>()
                })
                .collect();
            if l + 1 < n {
                out.extend(z.iter().map(|v| *v > 0.0));
                a = z.iter().map(|v| v.max(0.0)).collect();
            } else {
                out.extend(z.iter().zip(s.label()).map(|(p, t)| *p > t));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    /// `|analytic - numeric| / |numeric|` over the checked parameters.
    pub relative_error: f64,
    pub checked: usize,
    /// Parameters whose +-step crosses a ReLU or L1 kink, where a central
    /// difference does not estimate the derivative.
    pub skipped: usize,
}

/// Compares [`loss_and_gradient`] against central differences with `step`.
pub fn gradient_check(net: &MlpWeights, samples: &[GradientSample], step: f64) -> GradientCheck {
    let (_, analytic) = loss_and_gradient(net, samples);
    let base = kink_pattern(net, samples);
    let results: Vec<Option<(f64, f64)>> = (0..analytic.len())
        .into_par_iter()
        .map(|k| {
            let mut plus = net.clone();
            plus.params[k] += step;
            let mut minus = net.clone();
            minus.params[k] -= step;
            if kink_pattern(&plus, samples) != base || kink_pattern(&minus, samples) != base {
                return None;
            }
            let fd = (loss_and_gradient(&plus, samples).0 - loss_and_gradient(&minus, samples).0)
                / (2.0 * step);
            Some((analytic[k], fd))
        })
        .collect();
    let (mut num, mut den, mut checked) = (0.0, 0.0, 0);
    for (a, fd) in results.iter().flatten() {
        num += (a - fd) * (a - fd);
        den += fd * fd;
        checked += 1;
    }
    GradientCheck {
        relative_error: if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        },
        checked,
        skipped: analytic.len() - checked,
    }
}

/// Mean L1 and mean squared error over all label components, inference mode.
pub fn evaluate(net: &MlpWeights, samples: &[GradientSample]) -> (f64, f64) {
    let refs: Vec<&GradientSample> = samples.iter().collect();
    evaluate_refs(net, &refs)
}

fn evaluate_refs(net: &MlpWeights, samples: &[&GradientSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let parts: Vec<(f64, f64)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().fold((0.0, 0.0), |(l1, l2), s| {
                let p = net.predict(&s.features());
                let (e0, e1) = (p[0] - s.g_u, p[1] - s.g_v);
                (l1 + e0.abs() + e1.abs(), l2 + e0 * e0 + e1 * e1)
            })
        })
        .collect();
    let (l1, l2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let denom = (samples.len() * OUTPUTS) as f64;
    (l1 / denom, l2 / denom)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    /// Mean squared gradient error of the returned weights on the validation split.
    pub val_mse: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn best_val_l1(&self) -> f64 {
        self.epochs
            .iter()
            .map(|e| e.val_l1)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_l1,val_l1\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.train_l1, e.val_l1));
        }
        s
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g;
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g * g;
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Seeded train/validation split: indices are shuffled, the first
/// `round(fraction * n)` go to validation. With fewer than two samples the
/// single sample serves both roles.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    (idx[n_val..].to_vec(), val)
}

/// The train/validation split `train` uses for a dataset of `n` samples.
pub fn training_split(n: usize, cfg: &MlpConfig) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    split_indices(n, cfg.validation_fraction, rng.random())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefitReport {
    /// Validation MSE of the early-stopped weights.
    pub val_mse_before: f64,
    /// Validation MSE after the output refit.
    pub val_mse_after: f64,
    /// False when the refit did not lower validation MSE and was discarded.
    pub applied: bool,
}

/// `train`, then `refit_output_layer` on the training split. The refit is kept
/// only when it lowers validation MSE.
pub fn train_and_refit(
    dataset: &[GradientSample],
    cfg: &MlpConfig,
) -> Result<(MlpWeights, TrainingLog, RefitReport)> {
    let (weights, log) = train(dataset, cfg)?;
    let (train_idx, val_idx) = training_split(dataset.len(), cfg);
    let train_set: Vec<GradientSample> = train_idx.iter().map(|&i| dataset[i]).collect();
    let val: Vec<&GradientSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let refit = refit_output_layer(&weights, &train_set)?;
    let (_, after) = evaluate_refs(&refit, &val);
    let report = RefitReport {
        val_mse_before: log.val_mse,
        val_mse_after: after,
        applied: after < log.val_mse,
    };
    Ok((if report.applied { refit } else { weights }, log, report))
}

/// Trains with Adam on mean L1, stopping after `early_stop_patience` epochs
/// without a strict validation improvement. Returns the best-validation weights.
pub fn train(dataset: &[GradientSample], cfg: &MlpConfig) -> Result<(MlpWeights, TrainingLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx) =
        split_indices(dataset.len(), cfg.validation_fraction, rng.random());
    debug_assert_eq!(
        (train_idx.clone(), val_idx.clone()),
        training_split(dataset.len(), cfg)
    );
    let val: Vec<&GradientSample> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let probe: Vec<&GradientSample> = train_idx.iter().take(PROBE).map(|&i| &dataset[i]).collect();
    let mut net = MlpWeights::init_alive(cfg, rng.random(), &probe);
    let mut adam = Adam::new(net.params.len(), cfg.learning_rate);
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let mut grad = vec![0.0; net.params.len()];

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let samples: Vec<&GradientSample> = batch.iter().map(|&i| &dataset[i]).collect();
            let scale = 1.0 / (samples.len() * OUTPUTS) as f64;
            let seeds: Vec<u64> = samples.chunks(CHUNK).map(|_| rng.random()).collect();
            let parts: Vec<(f64, Vec<f64>)> = samples
                .par_chunks(CHUNK)
                .zip(seeds.par_iter())
                .map(|(chunk, &seed)| {
                    let mut g = vec![0.0; net.params.len()];
                    let drop = (cfg.dropout_p > 0.0)
                        .then(|| (cfg.dropout_p, ChaCha8Rng::seed_from_u64(seed)));
                    let l = accumulate(&net, chunk, scale, drop, &mut g);
                    (l, g)
                })
                .collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (l, g) in &parts {
                loss_sum += l;
                grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam.step(&mut net.params, &grad);
        }
        let train_l1 = loss_sum / (train_idx.len() * OUTPUTS) as f64;
        let (val_l1, _) = evaluate_refs(&net, &val);
        if !train_l1.is_finite() || !val_l1.is_finite() || net.params.iter().any(|p| !p.is_finite())
        {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log::debug!("epoch {epoch}: train {train_l1:.5} val {val_l1:.5}");
        epochs.push(EpochRecord {
            epoch,
            train_l1,
            val_l1,
        });
        if val_l1 < best.0 {
            best = (val_l1, net.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (_, weights, best_epoch) = best;
    let (_, val_mse) = evaluate_refs(&weights, &val);
    let log = TrainingLog {
        epochs,
        best_epoch,
        val_mse,
        train_size: train_idx.len(),
        val_size: val.len(),
        stopped_early,
    };
    Ok((weights, log))
}

fn pixel_features(image: &RasterImage, u: usize, v: usize) -> [f64; INPUTS] {
    let p = image.pixel(u, v);
    [
        p[0],
        p[1],
        p[2],
        normalized_coord(u, image.width()),
        normalized_coord(v, image.height()),
    ]
}

fn check_domain(image: &RasterImage, domain: Option<&SegMask>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::DimensionMismatch {
            expected: (image.width(), image.height(), 3),
            actual: image.dims(),
        });
    }
    if let Some(m) = domain {
        if (m.width(), m.height()) != (image.width(), image.height()) {
            return Err(Error::DimensionMismatch {
                expected: (image.width(), image.height(), 1),
                actual: (m.width(), m.height(), 1),
            });
        }
    }
    Ok(())
}

fn map_pixels(
    image: &RasterImage,
    domain: Option<&SegMask>,
    f: impl Fn(&[f64; INPUTS]) -> [f64; OUTPUTS] + Sync,
) -> GradientField {
    let (w, h) = (image.width(), image.height());
    let rows: Vec<Vec<(f64, f64)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    if domain.is_some_and(|m| !m.get(u, v)) {
                        (0.0, 0.0)
                    } else {
                        let g = f(&pixel_features(image, u, v));
                        (g[0], g[1])
                    }
                })
                .collect()
        })
        .collect();
    let (gu, gv) = rows.into_iter().flatten().unzip();
    GradientField::new(w, h, gu, gv).expect("matching sizes")
}

/// Runs the network on every pixel of `domain` (or the whole frame); other
/// pixels get zero slope.
/// Least-squares refit of the output layer on the inference-mode activations
/// of the last hidden layer. Everything below the output layer is unchanged.
///
/// Training with dropout in front of a linear output shrinks the output
/// weights toward zero; refitting them with dropout off removes that bias.
pub fn refit_output_layer(net: &MlpWeights, samples: &[GradientSample]) -> Result<MlpWeights> {
    if samples.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let k = net.dims[net.dims.len() - 2];
    let m = k + 1;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut ata = vec![0.0; m * m];
            let mut aty = vec![0.0; m * OUTPUTS];
            for s in chunk {
                let mut h = net.last_hidden(&s.features());
                h.push(1.0);
                let y = s.label();
                for r in 0..m {
                    for c in 0..m {
                        ata[r * m + c] += h[r] * h[c];
                    }
                    for o in 0..OUTPUTS {
                        aty[r * OUTPUTS + o] += h[r] * y[o];
                    }
                }
            }
            (ata, aty)
        })
        .collect();
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut aty = DMatrix::<f64>::zeros(m, OUTPUTS);
    for (a, b) in &parts {
        ata += DMatrix::from_row_slice(m, m, a);
        aty += DMatrix::from_row_slice(m, OUTPUTS, b);
    }
    // Units that never fire give zero rows; a tiny ridge keeps the system solvable.
    let ridge = 1e-9 * (ata.trace() / m as f64).max(1e-12);
    for d in 0..m {
        ata[(d, d)] += ridge;
    }
    let sol = ata
        .cholesky()
        .ok_or_else(|| Error::InvalidInput("output refit system is not positive definite".into()))?
        .solve(&aty);
    let mut out = net.clone();
    let off = out.params.len() - (k * OUTPUTS + OUTPUTS);
    for o in 0..OUTPUTS {
        for j in 0..k {
            out.params[off + o * k + j] = sol[(j, o)];
        }
        out.params[off + k * OUTPUTS + o] = sol[(k, o)];
    }
    if out.params.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidInput(
            "output refit produced non-finite weights".into(),
        ));
    }
    Ok(out)
}

pub fn infer_gradients(
    weights: &MlpWeights,
    image: &RasterImage,
    domain: Option<&SegMask>,
) -> Result<GradientField> {
    check_domain(image, domain)?;
    if weights.dims.first() != Some(&INPUTS) || weights.dims.last() != Some(&OUTPUTS) {
        return Err(Error::InvalidInput(format!(
            "weights have layer sizes {:?}",
            weights.dims
        )));
    }
    Ok(map_pixels(image, domain, |x| weights.predict(x)))
}

/// Feature weights of the lookup metric: colour at full weight, position at 0.25.
const LOOKUP_SCALE: [f64; INPUTS] = [1.0, 1.0, 1.0, 0.25, 0.25];

/// Exact nearest neighbour search over scaled feature vectors.
pub struct LookupTable {
    points: Vec<[f64; INPUTS]>,
    labels: Vec<[f64; OUTPUTS]>,
    nodes: Vec<Node>,
    root: usize,
}

struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl LookupTable {
    pub fn new(dataset: &[GradientSample]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        let points: Vec<[f64; INPUTS]> = dataset
            .iter()
            .map(|s| {
                let f = s.features();
                std::array::from_fn(|k| f[k] * LOOKUP_SCALE[k])
            })
            .collect();
        let labels = dataset.iter().map(GradientSample::label).collect();
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build(&points, &mut idx, &mut nodes).expect("non-empty");
        Ok(Self {
            points,
            labels,
            nodes,
            root,
        })
    }

    /// Label of the nearest stored sample; ties go to the lowest sample index.
    pub fn query(&self, features: &[f64; INPUTS]) -> [f64; OUTPUTS] {
        let q: [f64; INPUTS] = std::array::from_fn(|k| features[k] * LOOKUP_SCALE[k]);
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(self.root, &q, &mut best);
        self.labels[best.1]
    }

    fn search(&self, node: usize, q: &[f64; INPUTS], best: &mut (f64, usize)) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d: f64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 || (d == best.0 && n.point < best.1) {
            *best = (d, n.point);
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= best.0 {
                self.search(c, q, best);
            }
        }
    }
}

fn build(points: &[[f64; INPUTS]], idx: &mut [usize], nodes: &mut Vec<Node>) -> Option<usize> {
    if idx.is_empty() {
        return None;
    }
    let axis = (0..INPUTS)
        .max_by(|&a, &b| {
            let spread = |k: usize| {
                let (lo, hi) = idx
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                        (lo.min(points[i][k]), hi.max(points[i][k]))
                    });
                hi - lo
            };
            spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
        })
        .unwrap();
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
    });
    let point = idx[mid];
    let slot = nodes.len();
    nodes.push(Node {
        point,
        axis,
        left: None,
        right: None,
    });
    let (lo, hi) = idx.split_at_mut(mid);
    let left = build(points, lo, nodes);
    let right = build(points, &mut hi[1..], nodes);
    nodes[slot].left = left;
    nodes[slot].right = right;
    Some(slot)
}

/// Nearest neighbour slope lookup with the same domain handling as
/// [`infer_gradients`].
pub fn lookup_baseline(
    dataset: &[GradientSample],
    image: &RasterImage,
    domain: Option<&SegMask>,
) -> Result<GradientField> {
    check_domain(image, domain)?;
    let table = LookupTable::new(dataset)?;
    Ok(map_pixels(image, domain, |x| table.query(x)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rng: &mut ChaCha8Rng) -> GradientSample {
        GradientSample {
            i_r: rng.random(),
            i_g: rng.random(),
            i_b: rng.random(),
            u: rng.random(),
            v: rng.random(),
            g_u: rng.random_range(-1.0..1.0),
            g_v: rng.random_range(-1.0..1.0),
        }
    }

    fn batch(n: usize, seed: u64) -> Vec<GradientSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| sample(&mut rng)).collect()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let data = batch(100, 1);
        let net = MlpWeights::init(&MlpConfig::default(), 7);
        let check = gradient_check(&net, &data, 1e-4);
        assert!(check.relative_error < 1e-3, "{check:?}");
        assert!(check.skipped * 20 < check.checked, "{check:?}");
    }

    #[test]
    fn constant_label_is_learned() {
        let mut data = batch(40_000, 2);
        data.iter_mut().for_each(|s| {
            s.g_u = 0.0;
            s.g_v = 0.0;
        });
        let (w, log) = train(&data, &MlpConfig::default()).unwrap();
        assert!(log.best_val_l1() < 1e-3, "{}", log.best_val_l1());
        assert!(log.epochs.len() <= 120);
        assert!((evaluate(&w, &data).0 - log.best_val_l1()).abs() < 1e-2);
    }

    #[test]
    fn training_is_deterministic() {
        let data = batch(600, 4);
        let cfg = MlpConfig {
            max_epochs: 5,
            batch_size: 64,
            ..MlpConfig::default()
        };
        let (w1, l1) = train(&data, &cfg).unwrap();
        let (w2, l2) = train(&data, &cfg).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(w1.to_bytes(), w2.to_bytes());
    }

    #[test]
    fn returned_weights_are_the_best_recorded() {
        let data = batch(800, 5);
        let cfg = MlpConfig {
            max_epochs: 30,
            early_stop_patience: 3,
            learning_rate: 1e-2,
            ..MlpConfig::default()
        };
        let (w, log) = train(&data, &cfg).unwrap();
        let (_, val) = split_indices(
            data.len(),
            0.15,
            ChaCha8Rng::seed_from_u64(cfg.seed).random(),
        );
        let val: Vec<GradientSample> = val.iter().map(|&i| data[i]).collect();
        let best = log.epochs[log.best_epoch - 1].val_l1;
        assert_eq!(best, log.best_val_l1());
        assert!((evaluate(&w, &val).0 - best).abs() < 1e-12);
        if log.stopped_early {
            assert_eq!(log.epochs.len(), log.best_epoch + 3);
        }
    }

    #[test]
    fn refit_recovers_a_perturbed_output_layer() {
        let cfg = MlpConfig::default();
        let net = MlpWeights::init(&cfg, 3);
        let data: Vec<GradientSample> = batch(2000, 8)
            .into_iter()
            .map(|mut s| {
                let y = net.predict(&s.features());
                s.g_u = y[0];
                s.g_v = y[1];
                s
            })
            .collect();
        let mut bent = net.clone();
        let n = bent.params.len();
        let k = cfg.hidden_sizes[cfg.hidden_sizes.len() - 1];
        for p in &mut bent.params[n - k * OUTPUTS - OUTPUTS..] {
            *p = *p * 0.7 + 0.05;
        }
        assert!(evaluate(&bent, &data).1 > 1e-6);
        let fixed = refit_output_layer(&bent, &data).unwrap();
        assert!(
            evaluate(&fixed, &data).1 < 1e-12,
            "{}",
            evaluate(&fixed, &data).1
        );
        assert_eq!(
            fixed.params[..n - k * OUTPUTS - OUTPUTS],
            bent.params[..n - k * OUTPUTS - OUTPUTS]
        );
    }

    #[test]
    fn refit_is_kept_only_when_it_helps() {
        let data = batch(600, 12);
        let cfg = MlpConfig {
            max_epochs: 5,
            ..MlpConfig::default()
        };
        let (w, log, report) = train_and_refit(&data, &cfg).unwrap();
        assert_eq!(report.val_mse_before, log.val_mse);
        let (_, val) = training_split(data.len(), &cfg);
        let val: Vec<GradientSample> = val.iter().map(|&i| data[i]).collect();
        let mse = evaluate(&w, &val).1;
        assert!(mse <= log.val_mse + 1e-15);
        let expected = if report.applied {
            report.val_mse_after
        } else {
            log.val_mse
        };
        assert!((mse - expected).abs() < 1e-12);
        assert!(refit_output_layer(&w, &[]).is_err());
    }

    #[test]
    fn exploding_updates_are_reported() {
        let mut data = batch(100, 6);
        data[0].g_u = f64::INFINITY;
        let cfg = MlpConfig {
            max_epochs: 3,
            ..MlpConfig::default()
        };
        assert!(matches!(
            train(&data, &cfg),
            Err(Error::NonFiniteLoss { epoch: 1 })
        ));
        assert!(matches!(
            train(&[], &cfg),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn weights_round_trip() {
        let w = MlpWeights::init(&MlpConfig::default(), 9);
        let back = MlpWeights::from_bytes(&w.to_bytes()).unwrap();
        assert_eq!(back.dims(), w.dims());
        assert!(back
            .params()
            .iter()
            .zip(w.params())
            .all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(back.to_bytes(), w.to_bytes());
        assert!(MlpWeights::from_bytes(b"VTPX").is_err());
        let mut bytes = w.to_bytes();
        bytes.pop();
        assert!(MlpWeights::from_bytes(&bytes).is_err());
    }

    #[test]
    fn inference_respects_domain() {
        let w = MlpWeights::init(&MlpConfig::default(), 1);
        let img = RasterImage::filled(7, 5, 3, 0.4).unwrap();
        let empty = SegMask::empty(7, 5);
        let g = infer_gradients(&w, &img, Some(&empty)).unwrap();
        assert!(g.gu().iter().chain(g.gv()).all(|&x| x == 0.0));
        assert!(infer_gradients(&w, &RasterImage::filled(7, 5, 1, 0.4).unwrap(), None).is_err());
        // With positions fixed, identical colours give identical output.
        let one = MlpWeights::new(w.dims().to_vec(), w.params().to_vec()).unwrap();
        let a = one.predict(&[0.4, 0.4, 0.4, 0.5, 0.5]);
        assert_eq!(a, w.predict(&[0.4, 0.4, 0.4, 0.5, 0.5]));
    }

    #[test]
    fn lookup_matches_brute_force() {
        let data = batch(500, 11);
        let table = LookupTable::new(&data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for s in &data[..20] {
            assert_eq!(table.query(&s.features()), s.label());
        }
        for _ in 0..200 {
            let q = sample(&mut rng).features();
            let brute = data
                .iter()
                .min_by(|a, b| {
                    let d = |s: &GradientSample| {
                        let f = s.features();
                        (0..INPUTS)
                            .map(|k| ((f[k] - q[k]) * LOOKUP_SCALE[k]).powi(2))
                            .sum::<f64>()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            assert_eq!(table.query(&q), brute.label());
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(100, 0.15, 3);
        assert_eq!(v.len(), 15);
        assert_eq!(t.len(), 85);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.15, 3), (t, v));
    }
}
