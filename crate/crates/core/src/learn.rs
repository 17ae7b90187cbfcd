//! Convolutional surrogate `(mobility, scheme) -> (n_c, gamma)` with
//! hand-written backpropagation, classical classifiers for the feasibility
//! comparison, and the evaluation metrics.
//!
//! Network: conv3x3 -> ReLU -> max-pool 2x2 -> conv3x3 -> ReLU -> flatten ->
//! dense -> softplus, all in `f64`. The input is a `7 x H x W` raster (four
//! normalized mobility channels, then the `a`, `b`, `s` planes) and the output
//! a `2 x H x W` raster of scaled `n_c` and `gamma`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{fit_normalizer, CommFeatures, Normalizer, TrainingPair, TARGET_GAMMA, TARGET_NC};
use crate::error::{Error, Result};
use crate::mobility::MobilityFeatures;
use crate::rng::stream;
use crate::roadnet::RasterEmbedding;
use crate::scheme::FcScheme;

pub const INPUT_CHANNELS: usize = 7;
pub const OUTPUT_CHANNELS: usize = 2;

// ---------------------------------------------------------------- layers

/// 3x3 convolution, stride 1, zero padding 1. Parameters: weights
/// `[cout][cin][3][3]` followed by `cout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3x3 {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

impl Conv3x3 {
    pub fn num_params(&self) -> usize {
        self.cout * self.cin * 9 + self.cout
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let (h, w) = (self.h, self.w);
        let bias = &p[self.cout * self.cin * 9..];
        for co in 0..self.cout {
            let out = &mut y[co * h * w..(co + 1) * h * w];
            out.fill(bias[co]);
            for ci in 0..self.cin {
                let input = &x[ci * h * w..(ci + 1) * h * w];
                let k = &p[(co * self.cin + ci) * 9..(co * self.cin + ci + 1) * 9];
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let ii = i + ky;
                            if ii < 1 || ii > h {
                                continue;
                            }
                            for kx in 0..3 {
                                let jj = j + kx;
                                if jj < 1 || jj > w {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * input[(ii - 1) * w + jj - 1];
                            }
                        }
                        out[i * w + j] += acc;
                    }
                }
            }
        }
    }

    /// Accumulate parameter gradients into `dp` and, if given, input gradients into `dx`.
    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], dp: &mut [f64], mut dx: Option<&mut [f64]>) {
        let (h, w) = (self.h, self.w);
        let nw = self.cout * self.cin * 9;
        for co in 0..self.cout {
            let g = &dy[co * h * w..(co + 1) * h * w];
            dp[nw + co] += g.iter().sum::<f64>();
            for ci in 0..self.cin {
                let input = &x[ci * h * w..(ci + 1) * h * w];
                let base = (co * self.cin + ci) * 9;
                for i in 0..h {
                    for j in 0..w {
                        let gij = g[i * w + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for ky in 0..3 {
                            let ii = i + ky;
                            if ii < 1 || ii > h {
                                continue;
                            }
                            for kx in 0..3 {
                                let jj = j + kx;
                                if jj < 1 || jj > w {
                                    continue;
                                }
                                let at = (ii - 1) * w + jj - 1;
                                dp[base + ky * 3 + kx] += gij * input[at];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[ci * h * w + at] += gij * p[base + ky * 3 + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max-pool with stride 2; odd edges form partial windows. Ties go to the
/// first element in row-major window order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MaxPool2 {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(2)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(2)
    }

    /// Writes the pooled values and returns, per output, the flat input index that won.
    pub fn forward(&self, x: &[f64], y: &mut [f64]) -> Vec<usize> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut arg = vec![0; self.c * oh * ow];
        for c in 0..self.c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (ii, jj) = (2 * i + di, 2 * j + dj);
                            if ii >= self.h || jj >= self.w {
                                continue;
                            }
                            let at = c * self.h * self.w + ii * self.w + jj;
                            if best == usize::MAX || x[at] > x[best] {
                                best = at;
                            }
                        }
                    }
                    let o = c * oh * ow + i * ow + j;
                    arg[o] = best;
                    y[o] = x[best];
                }
            }
        }
        arg
    }

    pub fn backward(arg: &[usize], dy: &[f64], dx: &mut [f64]) {
        for (o, &at) in arg.iter().enumerate() {
            dx[at] += dy[o];
        }
    }
}

/// Fully connected layer. Parameters: weights `[nout][nin]`, then `nout` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
}

impl Dense {
    pub fn num_params(&self) -> usize {
        self.nout * self.nin + self.nout
    }

    pub fn forward(&self, p: &[f64], x: &[f64], y: &mut [f64]) {
        let bias = &p[self.nout * self.nin..];
        for o in 0..self.nout {
            let row = &p[o * self.nin..(o + 1) * self.nin];
            y[o] = bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn backward(&self, p: &[f64], x: &[f64], dy: &[f64], dp: &mut [f64], mut dx: Option<&mut [f64]>) {
        let nw = self.nout * self.nin;
        for o in 0..self.nout {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            dp[nw + o] += g;
            let row = o * self.nin;
            for i in 0..self.nin {
                dp[row + i] += g * x[i];
                if let Some(dx) = dx.as_deref_mut() {
                    dx[i] += g * p[row + i];
                }
            }
        }
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_grad(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus_inverse(y: f64) -> f64 {
    let y = y.max(1e-4);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

// ---------------------------------------------------------------- network

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub h: usize,
    pub w: usize,
    pub conv1: usize,
    pub conv2: usize,
}

impl Architecture {
    pub fn layers(&self) -> (Conv3x3, MaxPool2, Conv3x3, Dense) {
        let c1 = Conv3x3 {
            cin: INPUT_CHANNELS,
            cout: self.conv1,
            h: self.h,
            w: self.w,
        };
        let pool = MaxPool2 {
            c: self.conv1,
            h: self.h,
            w: self.w,
        };
        let c2 = Conv3x3 {
            cin: self.conv1,
            cout: self.conv2,
            h: pool.out_h(),
            w: pool.out_w(),
        };
        let head = Dense {
            nin: self.conv2 * pool.out_h() * pool.out_w(),
            nout: OUTPUT_CHANNELS * self.h * self.w,
        };
        (c1, pool, c2, head)
    }

    pub fn num_params(&self) -> usize {
        let (c1, _, c2, head) = self.layers();
        c1.num_params() + c2.num_params() + head.num_params()
    }

    fn offsets(&self) -> [usize; 4] {
        let (c1, _, c2, head) = self.layers();
        let a = c1.num_params();
        let b = a + c2.num_params();
        [0, a, b, b + head.num_params()]
    }

    pub fn input_len(&self) -> usize {
        INPUT_CHANNELS * self.h * self.w
    }

    pub fn output_len(&self) -> usize {
        OUTPUT_CHANNELS * self.h * self.w
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    z1: Vec<f64>,
    a1: Vec<f64>,
    arg: Vec<usize>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    y: Vec<f64>,
    pub out: Vec<f64>,
}

pub fn forward(arch: &Architecture, params: &[f64], x: &[f64]) -> Trace {
    let (c1, pool, c2, head) = arch.layers();
    let off = arch.offsets();
    let mut z1 = vec![0.0; c1.cout * c1.h * c1.w];
    c1.forward(&params[off[0]..off[1]], x, &mut z1);
    let a1: Vec<f64> = z1.iter().map(|&v| relu(v)).collect();
    let mut p1 = vec![0.0; pool.c * pool.out_h() * pool.out_w()];
    let arg = pool.forward(&a1, &mut p1);
    let mut z2 = vec![0.0; c2.cout * c2.h * c2.w];
    c2.forward(&params[off[1]..off[2]], &p1, &mut z2);
    let a2: Vec<f64> = z2.iter().map(|&v| relu(v)).collect();
    let mut y = vec![0.0; head.nout];
    head.forward(&params[off[2]..off[3]], &a2, &mut y);
    let out = y.iter().map(|&v| softplus(v)).collect();
    Trace {
        z1,
        a1,
        arg,
        p1,
        z2,
        a2,
        y,
        out,
    }
}

/// Gradient of a loss with respect to all parameters, given `d loss / d out`.
pub fn backward(arch: &Architecture, params: &[f64], x: &[f64], trace: &Trace, dout: &[f64]) -> Vec<f64> {
    let (c1, _, c2, head) = arch.layers();
    let off = arch.offsets();
    let mut grad = vec![0.0; arch.num_params()];
    let (g1, rest) = grad.split_at_mut(off[1]);
    let (g2, g3) = rest.split_at_mut(off[2] - off[1]);

    let dy: Vec<f64> = dout.iter().zip(&trace.y).map(|(d, &y)| d * softplus_grad(y)).collect();
    let mut da2 = vec![0.0; trace.a2.len()];
    head.backward(&params[off[2]..off[3]], &trace.a2, &dy, g3, Some(&mut da2));
    let dz2: Vec<f64> = da2.iter().zip(&trace.z2).map(|(d, &z)| d * relu_grad(z)).collect();
    let mut dp1 = vec![0.0; trace.p1.len()];
    c2.backward(&params[off[1]..off[2]], &trace.p1, &dz2, g2, Some(&mut dp1));
    let mut da1 = vec![0.0; trace.a1.len()];
    MaxPool2::backward(&trace.arg, &dp1, &mut da1);
    let dz1: Vec<f64> = da1.iter().zip(&trace.z1).map(|(d, &z)| d * relu_grad(z)).collect();
    c1.backward(&params[off[0]..off[1]], x, &dz1, g1, None);
    grad
}

/// Mean squared error over masked output entries and its gradient wrt the output.
pub fn masked_mse(out: &[f64], target: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.len()];
    for i in 0..out.len() {
        if mask[i] {
            let e = out[i] - target[i];
            loss += e * e;
            grad[i] = 2.0 * e / count;
        }
    }
    (loss / count, grad)
}

/// Xavier-uniform convolutions; zero head weights so the untrained model
/// predicts exactly its head bias.
pub fn init_params(arch: &Architecture, seed: u64) -> Vec<f64> {
    let (c1, _, c2, head) = arch.layers();
    let mut rng = stream(seed, "init", 0);
    let mut p = Vec::with_capacity(arch.num_params());
    for c in [c1, c2] {
        let bound = (6.0 / ((c.cin * 9 + c.cout * 9) as f64)).sqrt();
        p.extend((0..c.cout * c.cin * 9).map(|_| rng.random_range(-bound..bound)));
        p.extend(std::iter::repeat_n(0.0, c.cout));
    }
    p.extend(std::iter::repeat_n(0.0, head.num_params()));
    p
}

// ---------------------------------------------------------------- examples

/// One `(interval)` slice of a training pair, rasterized.
#[derive(Debug, Clone)]
pub struct Example {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub mask: Vec<bool>,
    pub pair: usize,
}

/// Input raster for interval `t`: normalized mobility then `a`, `b`, `s`.
/// Cells without links stay 0.
pub fn encode_input(
    emb: &RasterEmbedding,
    norm: &Normalizer,
    m: &MobilityFeatures,
    scheme: &FcScheme,
    t: usize,
) -> Vec<f64> {
    let cells = emb.num_cells();
    let mut x = vec![0.0; INPUT_CHANNELS * cells];
    let occupancy = emb.occupancy();
    for c in 0..INPUT_CHANNELS {
        let per_link: Vec<f64> = (0..emb.num_links())
            .map(|l| match c {
                0..=3 => norm.apply(c, m.channel(c)[[l, t]]),
                4 => scheme.a[[l, t]],
                5 => scheme.b[[l, t]],
                _ => scheme.s[[l, t]],
            })
            .collect();
        let raster = emb.rasterize(&per_link);
        for (k, v) in raster.into_iter().enumerate() {
            if occupancy[k] {
                x[c * cells + k] = v;
            }
        }
    }
    x
}

fn encode_target(emb: &RasterEmbedding, scale: [f64; 2], comm: &CommFeatures, t: usize) -> Vec<f64> {
    let gamma = comm.gamma_total();
    let nc: Vec<f64> = (0..emb.num_links()).map(|l| comm.nc[[l, t]] / scale[0]).collect();
    let g: Vec<f64> = (0..emb.num_links()).map(|l| gamma[[l, t]] / scale[1]).collect();
    let mut out = emb.rasterize(&nc);
    out.extend(emb.rasterize(&g));
    out
}

fn output_mask(emb: &RasterEmbedding) -> Vec<bool> {
    let occ = emb.occupancy();
    occ.iter().chain(occ.iter()).copied().collect()
}

pub fn build_examples(
    pairs: &[TrainingPair],
    emb: &RasterEmbedding,
    norm: &Normalizer,
    scale: [f64; 2],
) -> Result<Vec<Example>> {
    let mask = output_mask(emb);
    let mut out = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.scheme.num_links() != emb.num_links() {
            return Err(Error::Shape(format!(
                "pair {} has {} links, the raster embeds {}",
                p.pair_id,
                p.scheme.num_links(),
                emb.num_links()
            )));
        }
        for t in 0..p.scheme.num_intervals() {
            out.push(Example {
                x: encode_input(emb, norm, &p.mobility, &p.scheme, t),
                target: encode_target(emb, scale, &p.comm, t),
                mask: mask.clone(),
                pair: i,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub conv1: usize,
    pub conv2: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub folds: usize,
    /// Share of pairs held out for early stopping of the final model.
    pub validation_fraction: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            conv1: 8,
            conv2: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 200,
            patience: 10,
            folds: 10,
            validation_fraction: 0.1,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut e = Vec::new();
        if self.conv1 == 0 || self.conv2 == 0 {
            e.push("convolution channel counts must be positive".into());
        }
        if !(self.learning_rate > 0.0) {
            e.push(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            e.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            e.push("batch size must be positive".into());
        }
        if self.folds == 1 {
            e.push("cross-validation needs at least 2 folds (0 disables it)".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            e.push("validation fraction must lie in [0, 1)".into());
        }
        e
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLoss {
    pub fold: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial_validation_loss: f64,
    pub final_validation_loss: f64,
    pub final_train_loss: f64,
    pub epochs: usize,
    pub folds: Vec<FoldLoss>,
}

fn batch_loss(arch: &Architecture, params: &[f64], examples: &[&Example]) -> f64 {
    if examples.is_empty() {
        return f64::NAN;
    }
    let total: f64 = examples
        .par_iter()
        .map(|e| masked_mse(&forward(arch, params, &e.x).out, &e.target, &e.mask).0)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    total / examples.len() as f64
}

/// Output biases matching the mean scaled target of each output cell.
fn mean_bias(arch: &Architecture, examples: &[&Example]) -> Vec<f64> {
    let mut sum = vec![0.0; arch.output_len()];
    for e in examples {
        for (s, t) in sum.iter_mut().zip(&e.target) {
            *s += t;
        }
    }
    sum.iter()
        .map(|s| softplus_inverse(s / examples.len().max(1) as f64))
        .collect()
}

struct Fit {
    params: Vec<f64>,
    initial_validation: f64,
    validation: f64,
    train: f64,
    epochs: usize,
}

fn fit(arch: &Architecture, cfg: &TrainConfig, train: &[&Example], val: &[&Example], seed: u64) -> Result<Fit> {
    let mut params = init_params(arch, seed);
    let bias_at = arch.offsets()[3] - arch.output_len();
    params[bias_at..].copy_from_slice(&mean_bias(arch, train));
    let monitor = if val.is_empty() { train } else { val };
    let initial = batch_loss(arch, &params, monitor);
    let mut best = (initial, params.clone(), batch_loss(arch, &params, train), 0usize);
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    let mut epochs = 0;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, "shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let grads: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| {
                    let e = train[i];
                    let trace = forward(arch, &params, &e.x);
                    let (loss, dout) = masked_mse(&trace.out, &e.target, &e.mask);
                    (loss, backward(arch, &params, &e.x, &trace, &dout))
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for (l, g) in &grads {
                loss += l;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            let n = batch.len() as f64;
            grad.iter_mut().for_each(|g| *g /= n);
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::TrainingFailure { epoch, step });
            }
            if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
                let k = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= k);
            }
            for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *p += *v;
            }
            step += 1;
        }
        epochs = epoch + 1;
        let current = batch_loss(arch, &params, monitor);
        if !current.is_finite() {
            return Err(Error::TrainingFailure { epoch, step });
        }
        if current < best.0 {
            best = (current, params.clone(), f64::NAN, epochs);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (validation, params, mut train_loss, _) = best;
    if train_loss.is_nan() {
        train_loss = batch_loss(arch, &params, train);
    }
    log::debug!("fit: {epochs} epochs, train {train_loss:.5}, validation {validation:.5}");
    Ok(Fit {
        params,
        initial_validation: initial,
        validation,
        train: train_loss,
        epochs,
    })
}

/// Fitted surrogate with everything needed to encode inputs and decode outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: u32,
    pub architecture: Architecture,
    pub embedding: RasterEmbedding,
    pub normalizer: Normalizer,
    /// Divisors applied to `n_c` and `gamma` targets.
    pub target_scale: [f64; 2],
    pub num_params: usize,
    pub config: TrainConfig,
    pub summary: Option<TrainingSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateModel {
    pub header: ModelHeader,
    pub params: Vec<f64>,
}

fn split_pairs(n: usize, parts: usize, seed: u64, label: &str) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, label, 0));
    let mut out = vec![Vec::new(); parts];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % parts].push(i);
    }
    out
}

/// Train on `pairs`: optional k-fold cross-validation for reporting, then a
/// final fit on all pairs with a held-out share for early stopping.
pub fn train_surrogate(
    pairs: &[TrainingPair],
    emb: &RasterEmbedding,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(SurrogateModel, TrainingSummary)> {
    if pairs.is_empty() {
        return Err(Error::Data("the training set is empty".into()));
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let arch = Architecture {
        h: emb.h,
        w: emb.w,
        conv1: cfg.conv1,
        conv2: cfg.conv2,
    };
    let all: Vec<usize> = (0..pairs.len()).collect();
    let normalizer = fit_normalizer(pairs, &all)?;
    let scale = [normalizer.scale[TARGET_NC], normalizer.scale[TARGET_GAMMA]];
    let examples = build_examples(pairs, emb, &normalizer, scale)?;
    let select = |ids: &[usize]| -> Vec<&Example> {
        let mut keep = vec![false; pairs.len()];
        ids.iter().for_each(|&i| keep[i] = true);
        examples.iter().filter(|e| keep[e.pair]).collect()
    };

    let mut folds = Vec::new();
    if cfg.folds >= 2 {
        if cfg.folds > pairs.len() {
            return Err(Error::InvalidParameter(format!(
                "{} folds need at least as many pairs, got {}",
                cfg.folds,
                pairs.len()
            )));
        }
        let parts = split_pairs(pairs.len(), cfg.folds, seed, "folds");
        for (f, held) in parts.iter().enumerate() {
            let rest: Vec<usize> = parts
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, p)| p.iter().copied())
                .collect();
            let fit = fit(&arch, cfg, &select(&rest), &select(held), seed ^ (f as u64 + 1))?;
            folds.push(FoldLoss {
                fold: f,
                train_loss: fit.train,
                validation_loss: fit.validation,
                epochs: fit.epochs,
            });
        }
    }

    let held = ((pairs.len() as f64 * cfg.validation_fraction).round() as usize).min(pairs.len() - 1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut stream(seed, "holdout", 0));
    let (val_ids, train_ids) = order.split_at(held);
    let fit = fit(&arch, cfg, &select(train_ids), &select(val_ids), seed)?;
    let summary = TrainingSummary {
        initial_validation_loss: fit.initial_validation,
        final_validation_loss: fit.validation,
        final_train_loss: fit.train,
        epochs: fit.epochs,
        folds,
    };
    let model = SurrogateModel {
        header: ModelHeader {
            format: 1,
            architecture: arch,
            embedding: emb.clone(),
            normalizer,
            target_scale: scale,
            num_params: arch.num_params(),
            config: cfg.clone(),
            summary: Some(summary.clone()),
        },
        params: fit.params,
    };
    Ok((model, summary))
}

impl SurrogateModel {
    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Predicted communication features for every link and interval.
    pub fn predict(&self, m: &MobilityFeatures, scheme: &FcScheme) -> Result<CommFeatures> {
        let emb = &self.header.embedding;
        if m.num_links() != emb.num_links() || scheme.dim() != (m.num_links(), m.num_intervals()) {
            return Err(Error::Shape(format!(
                "model embeds {} links; got mobility {:?} and scheme {:?}",
                emb.num_links(),
                (m.num_links(), m.num_intervals()),
                scheme.dim()
            )));
        }
        let (links, nt) = scheme.dim();
        let cells = emb.num_cells();
        let mut nc = ndarray::Array2::zeros((links, nt));
        let mut gamma = ndarray::Array3::zeros((links, nt, 1));
        for t in 0..nt {
            let x = encode_input(emb, &self.header.normalizer, m, scheme, t);
            let out = forward(&self.header.architecture, &self.params, &x).out;
            for l in 0..links {
                let c = emb.flat_cell(l);
                nc[[l, t]] = out[c] * self.header.target_scale[0];
                gamma[[l, t, 0]] = out[cells + c] * self.header.target_scale[1];
            }
        }
        Ok(CommFeatures { nc, gamma })
    }

    /// Mean squared error of predicted `n_c` (unscaled) over pairs' links and intervals.
    pub fn nc_mse(&self, pairs: &[TrainingPair]) -> Result<f64> {
        let errs: Vec<Result<(f64, usize)>> = pairs
            .par_iter()
            .map(|p| {
                let pred = self.predict(&p.mobility, &p.scheme)?;
                let se = pred.nc.iter().zip(p.comm.nc.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                Ok((se, pred.nc.len()))
            })
            .collect();
        let (mut se, mut n) = (0.0, 0);
        for e in errs {
            let (a, b) = e?;
            se += a;
            n += b;
        }
        Ok(se / n.max(1) as f64)
    }

    /// File layout: header length (u64 LE), JSON header, parameters as f64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut bytes = Vec::with_capacity(8 + header.len() + 8 * self.params.len());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
        if bytes.len() < 8 {
            return Err(bad("truncated model file"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ModelHeader = serde_json::from_slice(body)?;
        let rest = &bytes[8 + hlen..];
        if rest.len() != 8 * header.num_params || header.num_params != header.architecture.num_params() {
            return Err(bad("parameter block does not match the architecture"));
        }
        let params = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { header, params })
    }
}

/// Predicted success ratio per interval: predicted holders over forecast nodes.
pub fn predicted_alphas(pred: &CommFeatures, m: &MobilityFeatures, zoi: &[usize]) -> Vec<Option<f64>> {
    (0..m.num_intervals())
        .map(|t| {
            let n: f64 = zoi.iter().map(|&l| m.n[[l, t]]).sum();
            let nc: f64 = zoi.iter().map(|&l| pred.nc[[l, t]]).sum();
            (n > 0.0).then(|| nc / n)
        })
        .collect()
}

// ---------------------------------------------------------------- baselines

/// Binary classifier over flat feature rows.
pub trait Classifier: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<()>;
    fn predict(&self, x: &[f64]) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub knn_k: usize,
    pub tree_max_depth: usize,
    pub forest_trees: usize,
    pub forest_max_depth: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            tree_max_depth: 8,
            forest_trees: 25,
            forest_max_depth: 8,
        }
    }
}

pub const CLASSIFIERS: [&str; 3] = ["knn", "decision-tree", "random-forest"];

/// Classifier registry.
pub fn classifier(name: &str, cfg: &BaselineConfig, seed: u64) -> Result<Box<dyn Classifier>> {
    match name {
        "knn" => Ok(Box::new(Knn::new(cfg.knn_k))),
        "decision-tree" => Ok(Box::new(DecisionTree::new(cfg.tree_max_depth, None, seed))),
        "random-forest" => Ok(Box::new(RandomForest::new(cfg.forest_trees, cfg.forest_max_depth, true, None, seed))),
        other => Err(Error::Unknown {
            kind: "classifier",
            name: other.to_string(),
            available: CLASSIFIERS.join(", "),
        }),
    }
}

fn check_rows(x: &[Vec<f64>], y: &[bool]) -> Result<usize> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Data(format!("{} rows with {} labels", x.len(), y.len())));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows differ in length".into()));
    }
    Ok(d)
}

/// Exhaustive k-nearest-neighbour vote on standardized features. A tied vote
/// goes to the nearest neighbour's label.
#[derive(Debug, Clone)]
pub struct Knn {
    pub k: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    rows: Vec<Vec<f64>>,
    labels: Vec<bool>,
}

impl Knn {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            mean: Vec::new(),
            scale: Vec::new(),
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }
}

impl Classifier for Knn {
    fn name(&self) -> &'static str {
        "knn"
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<()> {
        let d = check_rows(x, y)?;
        if self.k == 0 || self.k > x.len() {
            return Err(Error::InvalidParameter(format!("k = {} with {} samples", self.k, x.len())));
        }
        let n = x.len() as f64;
        self.mean = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        self.scale = (0..d)
            .map(|j| {
                let sd = (x.iter().map(|r| (r[j] - self.mean[j]).powi(2)).sum::<f64>() / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        self.rows = x.iter().map(|r| self.standardize(r)).collect();
        self.labels = y.to_vec();
        Ok(())
    }

    fn predict(&self, x: &[f64]) -> bool {
        let q = self.standardize(x);
        let mut d: Vec<(f64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let votes = d[..self.k].iter().filter(|(_, i)| self.labels[*i]).count();
        match (2 * votes).cmp(&self.k) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => self.labels[d[0].1],
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(bool),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// CART tree with Gini impurity; split candidates are midpoints between
/// consecutive distinct values. `max_features` samples that many features per
/// node (all when `None`). A tied leaf predicts `false`.
#[derive(Debug, Clone)]
pub struct DecisionTree {
    pub max_depth: usize,
    pub max_features: Option<usize>,
    seed: u64,
    root: Option<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl DecisionTree {
    pub fn new(max_depth: usize, max_features: Option<usize>, seed: u64) -> Self {
        Self {
            max_depth,
            max_features,
            seed,
            root: None,
        }
    }

    fn grow(&self, x: &[Vec<f64>], y: &[bool], idx: &mut [usize], depth: usize, rng: &mut impl Rng) -> Node {
        let pos = idx.iter().filter(|&&i| y[i]).count();
        let majority = 2 * pos > idx.len();
        if depth >= self.max_depth || pos == 0 || pos == idx.len() || idx.len() < 2 {
            return Node::Leaf(majority);
        }
        let d = x[0].len();
        let mut features: Vec<usize> = (0..d).collect();
        if let Some(m) = self.max_features {
            features.shuffle(rng);
            features.truncate(m.clamp(1, d));
            features.sort_unstable();
        }
        let parent = gini(pos, idx.len());
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = idx.to_vec();
        for &f in &features {
            sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            let mut left_pos = 0;
            for k in 1..sorted.len() {
                left_pos += y[sorted[k - 1]] as usize;
                let (lo, hi) = (x[sorted[k - 1]][f], x[sorted[k]][f]);
                if lo == hi {
                    continue;
                }
                let n = sorted.len() as f64;
                let impurity = (k as f64 * gini(left_pos, k)
                    + (n - k as f64) * gini(pos - left_pos, sorted.len() - k))
                    / n;
                if impurity < parent - 1e-12 && best.is_none_or(|b| impurity < b.0) {
                    best = Some((impurity, f, 0.5 * (lo + hi)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return Node::Leaf(majority);
        };
        let split = stable_partition(idx, |&i| x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(split);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.grow(x, y, l, depth + 1, rng)),
            right: Box::new(self.grow(x, y, r, depth + 1, rng)),
        }
    }

    fn fit_indices(&mut self, x: &[Vec<f64>], y: &[bool], idx: &mut [usize]) {
        let mut rng = stream(self.seed, "tree", 0);
        self.root = Some(self.grow(x, y, idx, 0, &mut rng));
    }
}

/// Stable in-place partition; returns the count of elements satisfying `pred`.
fn stable_partition(v: &mut [usize], pred: impl Fn(&usize) -> bool) -> usize {
    let (yes, no): (Vec<usize>, Vec<usize>) = v.iter().partition(|i| pred(i));
    let k = yes.len();
    v[..k].copy_from_slice(&yes);
    v[k..].copy_from_slice(&no);
    k
}

impl Classifier for DecisionTree {
    fn name(&self) -> &'static str {
        "decision-tree"
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<()> {
        check_rows(x, y)?;
        let mut idx: Vec<usize> = (0..x.len()).collect();
        self.fit_indices(x, y, &mut idx);
        Ok(())
    }

    fn predict(&self, x: &[f64]) -> bool {
        let mut node = self.root.as_ref().expect("predict before fit");
        loop {
            match node {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }
}

/// Bagged trees with per-node feature subsampling (default `sqrt(d)`); a tied
/// vote predicts `false`.
#[derive(Debug, Clone)]
pub struct RandomForest {
    pub trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    pub max_features: Option<usize>,
    seed: u64,
    fitted: Vec<DecisionTree>,
}

impl RandomForest {
    pub fn new(trees: usize, max_depth: usize, bootstrap: bool, max_features: Option<usize>, seed: u64) -> Self {
        Self {
            trees,
            max_depth,
            bootstrap,
            max_features,
            seed,
            fitted: Vec::new(),
        }
    }

    /// Forest that reduces to one plain tree: no bagging, all features.
    pub fn single_tree(max_depth: usize, seed: u64) -> Self {
        Self::new(1, max_depth, false, Some(usize::MAX), seed)
    }
}

impl Classifier for RandomForest {
    fn name(&self) -> &'static str {
        "random-forest"
    }

    fn fit(&mut self, x: &[Vec<f64>], y: &[bool]) -> Result<()> {
        let d = check_rows(x, y)?;
        if self.trees == 0 {
            return Err(Error::InvalidParameter("a forest needs at least one tree".into()));
        }
        let features = match self.max_features {
            Some(m) if m >= d => None,
            Some(m) => Some(m),
            None => Some(((d as f64).sqrt().round() as usize).max(1)),
        };
        self.fitted = (0..self.trees)
            .into_par_iter()
            .map(|t| {
                let mut tree = DecisionTree::new(self.max_depth, features, crate::rng::derive_seed(self.seed, t as u64));
                let mut idx: Vec<usize> = if self.bootstrap {
                    let mut rng = stream(self.seed, "bag", t as u64);
                    (0..x.len()).map(|_| rng.random_range(0..x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                tree.fit_indices(x, y, &mut idx);
                tree
            })
            .collect();
        Ok(())
    }

    fn predict(&self, x: &[f64]) -> bool {
        let votes = self.fitted.iter().filter(|t| t.predict(x)).count();
        2 * votes > self.fitted.len()
    }
}

// ---------------------------------------------------------------- metrics

/// F1 of the positive class; 0 when precision + recall is 0.
pub fn f_score(predicted: &[bool], truth: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let tp = predicted.iter().zip(truth).filter(|(p, t)| **p && **t).count() as f64;
    let fp = predicted.iter().zip(truth).filter(|(p, t)| **p && !**t).count() as f64;
    let fneg = predicted.iter().zip(truth).filter(|(p, t)| !**p && **t).count() as f64;
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

/// Share of emitted strategies that the simulator found infeasible.
pub fn rejection_probability(verified_feasible: &[bool]) -> f64 {
    if verified_feasible.is_empty() {
        return 0.0;
    }
    verified_feasible.iter().filter(|&&f| !f).count() as f64 / verified_feasible.len() as f64
}

/// Flattened `(n, lambda, tau, nu, a, b, s)` per link and interval.
pub fn pair_row(p: &TrainingPair) -> Vec<f64> {
    let (links, nt) = p.scheme.dim();
    let m = &p.mobility;
    let mut row = Vec::with_capacity(links * nt * 7);
    for l in 0..links {
        for t in 0..nt {
            row.extend([
                m.n[[l, t]],
                m.lambda[[l, t]],
                m.tau[[l, t]],
                m.nu[[l, t]],
                p.scheme.a[[l, t]],
                p.scheme.b[[l, t]],
                p.scheme.s[[l, t]],
            ]);
        }
    }
    row
}

/// Whether the pair's simulated features meet `alpha0` on `zoi` in every interval.
pub fn pair_feasible(p: &TrainingPair, zoi: &[usize], alpha0: f64) -> bool {
    (0..p.scheme.num_intervals()).all(|t| {
        let n: f64 = zoi.iter().map(|&l| p.mobility.n[[l, t]]).sum();
        let nc: f64 = zoi.iter().map(|&l| p.comm.nc[[l, t]]).sum();
        n > 0.0 && nc / n >= alpha0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f_score_arithmetic() {
        assert_eq!(f_score(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        // tp 1, fp 1, fn 1: P = R = 0.5.
        assert_eq!(f_score(&[true, true, false], &[true, false, true]).unwrap(), 0.5);
        assert_eq!(f_score(&[false, false], &[true, true]).unwrap(), 0.0);
        assert!(f_score(&[true], &[]).is_err());
    }

    #[test]
    fn rejection_is_share_of_failures() {
        assert_eq!(rejection_probability(&[true, true, false, true]), 0.25);
        assert_eq!(rejection_probability(&[]), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        for x in [-1000.0, -30.5, -1.0, 0.0, 1.0, 30.5, 1000.0] {
            let y = softplus(x);
            assert!(y.is_finite() && y >= 0.0);
        }
        assert!((softplus(softplus_inverse(0.3)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn pool_prefers_first_index_on_ties() {
        let pool = MaxPool2 { c: 1, h: 2, w: 2 };
        let mut y = [0.0];
        let arg = pool.forward(&[1.0, 1.0, 1.0, 0.0], &mut y);
        assert_eq!(arg, vec![0]);
        let pool = MaxPool2 { c: 1, h: 3, w: 3 };
        assert_eq!((pool.out_h(), pool.out_w()), (2, 2));
    }

    #[test]
    fn registry_lists_known_names() {
        let cfg = BaselineConfig::default();
        for name in CLASSIFIERS {
            assert_eq!(classifier(name, &cfg, 0).unwrap().name(), name);
        }
        assert!(matches!(classifier("svm", &cfg, 0), Err(Error::Unknown { .. })));
    }
}
