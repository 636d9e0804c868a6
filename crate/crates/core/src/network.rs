//! Three-branch window classifier with hand-written reverse-mode gradients.
//!
//! * temporal: three conv blocks (conv, batch norm, GELU) over the temporal
//!   matrix, multi-scale pooling (global mean, per-segment means, global
//!   max) and a linear projection;
//! * region: linear, GELU, linear over the 8 region ratios;
//! * stat: linear, batch norm, GELU, linear over the statistical vector;
//! * head: dropout before each of three linears, GELU between them.
//!
//! Branch outputs are concatenated in the order temporal, region, stat.
//! Activations are row-major with the channel axis last; a temporal map for
//! a batch is `batch x time x channels`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{FeatureConfig, WindowFeatures, REGION_DIM};
use crate::linalg::{column_sums, gemm, MatRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Branches {
    pub temporal: bool,
    pub region: bool,
    pub stat: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Branches { temporal: true, region: true, stat: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the statistical vector and of each temporal row.
    pub input_dim: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool_segments: usize,
    pub temporal_dim: usize,
    pub region_hidden: usize,
    pub region_dim: usize,
    pub stat_hidden: usize,
    pub stat_dim: usize,
    pub head_hidden: Vec<usize>,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub branches: Branches,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 256,
            conv_channels: vec![128, 128, 64],
            kernel: 3,
            pool_segments: 4,
            temporal_dim: 128,
            region_hidden: 32,
            region_dim: 32,
            stat_hidden: 128,
            stat_dim: 64,
            head_hidden: vec![128, 64],
            dropout: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            branches: Branches::default(),
        }
    }
}

impl ModelConfig {
    pub fn for_features(features: &FeatureConfig) -> Self {
        ModelConfig { input_dim: features.feature_dim(), ..ModelConfig::default() }
    }

    pub fn fusion_width(&self) -> usize {
        let b = self.branches;
        (b.temporal as usize) * self.temporal_dim + (b.region as usize) * self.region_dim + (b.stat as usize) * self.stat_dim
    }

    pub fn pooled_width(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * (self.pool_segments + 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let b = self.branches;
        if !(b.temporal || b.region || b.stat) {
            return bad("at least one branch must be enabled");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout rate must lie in [0, 1)");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("conv kernel must be odd");
        }
        if b.temporal && (self.conv_channels.is_empty() || self.pool_segments == 0) {
            return bad("temporal branch needs conv channels and pool segments");
        }
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(|_| rng.random_range(-bound..bound)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Decoupled weight decay applies to conv and linear weights only.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

/// Fully connected layer, `weight` is `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn zeros(inp: usize, out: usize) -> Self {
        Linear { weight: Tensor::zeros(&[inp, out]), bias: Tensor::zeros(&[out]) }
    }

    fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Linear { weight: Tensor::uniform(&[inp, out], (6.0 / inp as f64).sqrt(), rng), bias: Tensor::zeros(&[out]) }
    }

    fn out_dim(&self) -> usize {
        self.bias.len()
    }
}

/// 1-D convolution, `weight` is `kernel x in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv1d {
    fn zeros(kernel: usize, inp: usize, out: usize) -> Self {
        Conv1d { weight: Tensor::zeros(&[kernel, inp, out]), bias: Tensor::zeros(&[out]) }
    }

    fn init(kernel: usize, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (kernel * inp) as f64;
        Conv1d { weight: Tensor::uniform(&[kernel, inp, out], (6.0 / fan_in).sqrt(), rng), bias: Tensor::zeros(&[out]) }
    }

    fn kernel(&self) -> usize {
        self.weight.shape[0]
    }

    fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }

    fn out_channels(&self) -> usize {
        self.weight.shape[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BatchNorm {
    fn new(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::filled(&[c], 1.0),
        }
    }

    fn zeros(c: usize) -> Self {
        BatchNorm {
            gamma: Tensor::zeros(&[c]),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::zeros(&[c]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalBranch {
    pub conv: Vec<Conv1d>,
    pub norm: Vec<BatchNorm>,
    pub proj: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionBranch {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatBranch {
    pub fc1: Linear,
    pub norm: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub temporal: Option<TemporalBranch>,
    pub region: Option<RegionBranch>,
    pub stat: Option<StatBranch>,
    pub head: Vec<Linear>,
    /// Number of optimizer updates applied so far.
    pub step: u64,
}

/// Gradients share the parameter layout; running statistics stay zero.
pub type Gradients = ModelParams;

macro_rules! visit_tensors {
    ($params:expr, $f:expr, $($m:tt)?) => {{
        let mut f = $f;
        if let Some(t) = & $($m)? $params.temporal {
            for i in 0..t.conv.len() {
                f(format!("temporal.conv{i}.weight"), ParamKind::Weight, & $($m)? t.conv[i].weight);
                f(format!("temporal.conv{i}.bias"), ParamKind::Bias, & $($m)? t.conv[i].bias);
                f(format!("temporal.bn{i}.gamma"), ParamKind::NormScale, & $($m)? t.norm[i].gamma);
                f(format!("temporal.bn{i}.beta"), ParamKind::NormShift, & $($m)? t.norm[i].beta);
                f(format!("temporal.bn{i}.running_mean"), ParamKind::RunningMean, & $($m)? t.norm[i].running_mean);
                f(format!("temporal.bn{i}.running_var"), ParamKind::RunningVar, & $($m)? t.norm[i].running_var);
            }
            f("temporal.proj.weight".into(), ParamKind::Weight, & $($m)? t.proj.weight);
            f("temporal.proj.bias".into(), ParamKind::Bias, & $($m)? t.proj.bias);
        }
        if let Some(r) = & $($m)? $params.region {
            f("region.fc1.weight".into(), ParamKind::Weight, & $($m)? r.fc1.weight);
            f("region.fc1.bias".into(), ParamKind::Bias, & $($m)? r.fc1.bias);
            f("region.fc2.weight".into(), ParamKind::Weight, & $($m)? r.fc2.weight);
            f("region.fc2.bias".into(), ParamKind::Bias, & $($m)? r.fc2.bias);
        }
        if let Some(s) = & $($m)? $params.stat {
            f("stat.fc1.weight".into(), ParamKind::Weight, & $($m)? s.fc1.weight);
            f("stat.fc1.bias".into(), ParamKind::Bias, & $($m)? s.fc1.bias);
            f("stat.bn.gamma".into(), ParamKind::NormScale, & $($m)? s.norm.gamma);
            f("stat.bn.beta".into(), ParamKind::NormShift, & $($m)? s.norm.beta);
            f("stat.bn.running_mean".into(), ParamKind::RunningMean, & $($m)? s.norm.running_mean);
            f("stat.bn.running_var".into(), ParamKind::RunningVar, & $($m)? s.norm.running_var);
            f("stat.fc2.weight".into(), ParamKind::Weight, & $($m)? s.fc2.weight);
            f("stat.fc2.bias".into(), ParamKind::Bias, & $($m)? s.fc2.bias);
        }
        for i in 0..$params.head.len() {
            f(format!("head.fc{}.weight", i + 1), ParamKind::Weight, & $($m)? $params.head[i].weight);
            f(format!("head.fc{}.bias", i + 1), ParamKind::Bias, & $($m)? $params.head[i].bias);
        }
    }};
}

impl ModelParams {
    fn build(
        config: &ModelConfig,
        mut linear: impl FnMut(usize, usize) -> Linear,
        mut conv: impl FnMut(usize, usize, usize) -> Conv1d,
        norm: impl Fn(usize) -> BatchNorm,
    ) -> Self {
        let b = config.branches;
        let temporal = b.temporal.then(|| {
            let mut chans = vec![config.input_dim];
            chans.extend(&config.conv_channels);
            let conv_layers = chans.windows(2).map(|w| conv(config.kernel, w[0], w[1])).collect();
            TemporalBranch {
                conv: conv_layers,
                norm: config.conv_channels.iter().map(|&c| norm(c)).collect(),
                proj: linear(config.pooled_width(), config.temporal_dim),
            }
        });
        let region = b
            .region
            .then(|| RegionBranch { fc1: linear(REGION_DIM, config.region_hidden), fc2: linear(config.region_hidden, config.region_dim) });
        let stat = b.stat.then(|| StatBranch {
            fc1: linear(config.input_dim, config.stat_hidden),
            norm: norm(config.stat_hidden),
            fc2: linear(config.stat_hidden, config.stat_dim),
        });
        let mut widths = vec![config.fusion_width()];
        widths.extend(&config.head_hidden);
        widths.push(1);
        let head = widths.windows(2).map(|w| linear(w[0], w[1])).collect();
        ModelParams { config: config.clone(), temporal, region, stat, head, step: 0 }
    }

    /// Kaiming-uniform (fan-in) weights, zero biases, unit norm scales.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        // One generator threads through every layer in declaration order.
        let rng = std::cell::RefCell::new(rng);
        Ok(Self::build(
            config,
            |i, o| Linear::init(i, o, &mut **rng.borrow_mut()),
            |k, i, o| Conv1d::init(k, i, o, &mut **rng.borrow_mut()),
            BatchNorm::new,
        ))
    }

    /// Every tensor zero, including running statistics.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, Linear::zeros, Conv1d::zeros, BatchNorm::zeros))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, t| t.data.fill(0.0));
        z.step = 0;
        z
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, ParamKind, &Tensor)) {
        visit_tensors!(self, |name: String, kind, t: &Tensor| f(&name, kind, t),);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Tensor)) {
        visit_tensors!(self, |name: String, kind, t: &mut Tensor| f(&name, kind, t), mut);
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, kind, t| {
            if kind.is_trainable() {
                n += t.len();
            }
        });
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, t| ok &= t.data.iter().all(|x| x.is_finite()));
        ok
    }

    /// Installs the running-statistic updates recorded by a batch-statistics forward.
    pub fn apply_running_stats(&mut self, cache: &ForwardCache) {
        let mut updates = cache.running.iter();
        if let Some(t) = &mut self.temporal {
            for norm in &mut t.norm {
                if let Some((m, v)) = updates.next() {
                    norm.running_mean.data.clone_from(m);
                    norm.running_var.data.clone_from(v);
                }
            }
        }
        if let Some(s) = &mut self.stat {
            if let Some((m, v)) = updates.next() {
                s.norm.running_mean.data.clone_from(m);
                s.norm.running_var.data.clone_from(v);
            }
        }
    }
}

/// A batch of windows in the network's input layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub len: usize,
    pub window_len: usize,
    pub input_dim: usize,
    /// `len x window_len x input_dim`
    pub temporal: Vec<f64>,
    /// `len x input_dim`
    pub stats: Vec<f64>,
    /// `len x 8`
    pub region: Vec<f64>,
}

impl Batch {
    pub fn from_windows(windows: &[&WindowFeatures]) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::ShapeMismatch("empty batch".into()))?;
        let input_dim = first.stats.len();
        let window_len = first.temporal.len() / input_dim.max(1);
        let mut batch = Batch {
            len: windows.len(),
            window_len,
            input_dim,
            temporal: Vec::with_capacity(windows.len() * window_len * input_dim),
            stats: Vec::with_capacity(windows.len() * input_dim),
            region: Vec::with_capacity(windows.len() * REGION_DIM),
        };
        for w in windows {
            if w.stats.len() != input_dim || w.temporal.len() != window_len * input_dim {
                return Err(Error::ShapeMismatch(format!("window `{}`@{} does not match the batch layout", w.video_id, w.window_start)));
            }
            batch.temporal.extend_from_slice(&w.temporal);
            batch.stats.extend_from_slice(&w.stats);
            batch.region.extend_from_slice(&w.region);
        }
        Ok(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization and active dropout.
    Train,
    /// Running statistics and no dropout; deterministic.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub batch_stats: bool,
    pub dropout: bool,
}

impl From<Mode> for ForwardOptions {
    fn from(mode: Mode) -> Self {
        match mode {
            Mode::Train => ForwardOptions { batch_stats: true, dropout: true },
            Mode::Eval => ForwardOptions { batch_stats: false, dropout: false },
        }
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Adaptive segment bounds: segment j covers `[floor(j*T/S), floor((j+1)*T/S))`.
pub fn segment_bounds(len: usize, segments: usize) -> Vec<(usize, usize)> {
    (0..segments).map(|j| (j * len / segments, (j + 1) * len / segments)).collect()
}

/// Mean of each adaptive segment of a `len x channels` map.
pub fn local_segment_pool(map: &[f64], len: usize, channels: usize, segments: usize) -> Vec<Vec<f64>> {
    segment_bounds(len, segments)
        .into_iter()
        .map(|(a, b)| {
            let mut mean = vec![0.0; channels];
            for t in a..b {
                for (m, x) in mean.iter_mut().zip(&map[t * channels..(t + 1) * channels]) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= (b - a) as f64);
            mean
        })
        .collect()
}

fn linear_forward(x: &[f64], rows: usize, layer: &Linear) -> Vec<f64> {
    let (inp, out) = (layer.weight.shape[0], layer.weight.shape[1]);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(&layer.bias.data);
    }
    gemm(MatRef::new(x, rows, inp), MatRef::new(&layer.weight.data, inp, out), &mut y, true);
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
fn linear_backward(x: &[f64], dy: &[f64], rows: usize, layer: &Linear, grad: &mut Linear, want_dx: bool) -> Option<Vec<f64>> {
    let (inp, out) = (layer.weight.shape[0], layer.weight.shape[1]);
    gemm(MatRef::new(x, rows, inp).t(), MatRef::new(dy, rows, out), &mut grad.weight.data, true);
    for (g, s) in grad.bias.data.iter_mut().zip(column_sums(dy, out)) {
        *g += s;
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; rows * inp];
        gemm(MatRef::new(dy, rows, out), MatRef::new(&layer.weight.data, inp, out).t(), &mut dx, false);
        dx
    })
}

fn im2col(x: &[f64], batch: usize, len: usize, chans: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let width = kernel * chans;
    let mut col = vec![0.0; batch * len * width];
    for b in 0..batch {
        for t in 0..len {
            let row = &mut col[(b * len + t) * width..(b * len + t + 1) * width];
            for k in 0..kernel {
                let Some(s) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let src = &x[(b * len + s) * chans..(b * len + s + 1) * chans];
                row[k * chans..(k + 1) * chans].copy_from_slice(src);
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], batch: usize, len: usize, chans: usize, kernel: usize) -> Vec<f64> {
    let pad = kernel / 2;
    let width = kernel * chans;
    let mut dx = vec![0.0; batch * len * chans];
    for b in 0..batch {
        for t in 0..len {
            let row = &dcol[(b * len + t) * width..(b * len + t + 1) * width];
            for k in 0..kernel {
                let Some(s) = (t + k).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let dst = &mut dx[(b * len + s) * chans..(b * len + s + 1) * chans];
                for (d, g) in dst.iter_mut().zip(&row[k * chans..(k + 1) * chans]) {
                    *d += g;
                }
            }
        }
    }
    dx
}

struct NormOut {
    y: Vec<f64>,
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    running: Option<(Vec<f64>, Vec<f64>)>,
}

fn batch_norm_forward(x: &[f64], cols: usize, bn: &BatchNorm, batch_stats: bool, cfg: &ModelConfig) -> NormOut {
    let rows = x.len() / cols;
    let (mean, var, running) = if batch_stats {
        let mean: Vec<f64> = column_sums(x, cols).into_iter().map(|s| s / rows as f64).collect();
        let mut var = vec![0.0; cols];
        for row in x.chunks_exact(cols) {
            for ((v, xi), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (xi - m) * (xi - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let mom = cfg.bn_momentum;
        let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let rm = bn.running_mean.data.iter().zip(&mean).map(|(r, m)| (1.0 - mom) * r + mom * m).collect();
        let rv = bn.running_var.data.iter().zip(&var).map(|(r, v)| (1.0 - mom) * r + mom * v * unbias).collect();
        (mean, var, Some((rm, rv)))
    } else {
        (bn.running_mean.data.clone(), bn.running_var.data.clone(), None)
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.bn_eps).sqrt()).collect();
    let mut zhat = Vec::with_capacity(x.len());
    let mut y = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        for c in 0..cols {
            let z = (row[c] - mean[c]) * inv_std[c];
            zhat.push(z);
            y.push(bn.gamma.data[c] * z + bn.beta.data[c]);
        }
    }
    NormOut { y, zhat, inv_std, running }
}

fn batch_norm_backward(
    dy: &[f64],
    zhat: &[f64],
    inv_std: &[f64],
    cols: usize,
    bn: &BatchNorm,
    grad: &mut BatchNorm,
    batch_stats: bool,
) -> Vec<f64> {
    let rows = dy.len() / cols;
    let mut sum_dy = vec![0.0; cols];
    let mut sum_dy_z = vec![0.0; cols];
    for (drow, zrow) in dy.chunks_exact(cols).zip(zhat.chunks_exact(cols)) {
        for c in 0..cols {
            sum_dy[c] += drow[c];
            sum_dy_z[c] += drow[c] * zrow[c];
        }
    }
    for c in 0..cols {
        grad.gamma.data[c] += sum_dy_z[c];
        grad.beta.data[c] += sum_dy[c];
    }
    let n = rows as f64;
    let mut dx = Vec::with_capacity(dy.len());
    for (drow, zrow) in dy.chunks_exact(cols).zip(zhat.chunks_exact(cols)) {
        for c in 0..cols {
            let scale = bn.gamma.data[c] * inv_std[c];
            dx.push(if batch_stats { scale * (drow[c] - sum_dy[c] / n - zrow[c] * sum_dy_z[c] / n) } else { scale * drow[c] });
        }
    }
    dx
}

fn gelu_backward(dy: &mut [f64], pre: &[f64]) {
    for (d, &x) in dy.iter_mut().zip(pre) {
        *d *= gelu_grad(x);
    }
}

struct ConvCache {
    col: Vec<f64>,
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre: Vec<f64>,
}

struct TemporalCache {
    convs: Vec<ConvCache>,
    argmax: Vec<usize>,
    pooled: Vec<f64>,
}

struct RegionCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct StatCache {
    input: Vec<f64>,
    zhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

struct HeadCache {
    /// Input of each head linear after dropout.
    inputs: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per head linear, when active.
    masks: Vec<Option<Vec<f64>>>,
    /// Pre-activation of each hidden head layer.
    pre: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from one forward call.
pub struct ForwardCache {
    step: u64,
    rows: usize,
    window_len: usize,
    options: ForwardOptions,
    temporal: Option<TemporalCache>,
    region: Option<RegionCache>,
    stat: Option<StatCache>,
    head: HeadCache,
    /// Running (mean, var) per batch-norm layer, temporal first then stat.
    running: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.rows
    }

    pub fn options(&self) -> ForwardOptions {
        self.options
    }
}

fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn check_shapes(batch: &Batch, params: &ModelParams) -> Result<()> {
    let cfg = &params.config;
    if batch.len == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }
    if batch.input_dim != cfg.input_dim {
        return Err(Error::ShapeMismatch(format!("feature width {} but model expects {}", batch.input_dim, cfg.input_dim)));
    }
    if cfg.branches.temporal && batch.window_len < cfg.pool_segments {
        return Err(Error::ShapeMismatch(format!(
            "window length {} shorter than {} pooling segments",
            batch.window_len, cfg.pool_segments
        )));
    }
    let expect = [
        (batch.temporal.len(), batch.len * batch.window_len * batch.input_dim),
        (batch.stats.len(), batch.len * batch.input_dim),
        (batch.region.len(), batch.len * REGION_DIM),
    ];
    if expect.iter().any(|(a, b)| a != b) {
        return Err(Error::ShapeMismatch("batch buffers inconsistent".into()));
    }
    Ok(())
}

fn temporal_forward(
    branch: &TemporalBranch,
    batch: &Batch,
    cfg: &ModelConfig,
    opts: ForwardOptions,
    running: &mut Vec<(Vec<f64>, Vec<f64>)>,
) -> (Vec<f64>, TemporalCache) {
    let (rows, len) = (batch.len, batch.window_len);
    let mut x = batch.temporal.clone();
    let mut convs = Vec::with_capacity(branch.conv.len());
    for (conv, bn) in branch.conv.iter().zip(&branch.norm) {
        let (k, cin, cout) = (conv.kernel(), conv.in_channels(), conv.out_channels());
        let col = im2col(&x, rows, len, cin, k);
        let mut z = Vec::with_capacity(rows * len * cout);
        for _ in 0..rows * len {
            z.extend_from_slice(&conv.bias.data);
        }
        gemm(MatRef::new(&col, rows * len, k * cin), MatRef::new(&conv.weight.data, k * cin, cout), &mut z, true);
        let norm = batch_norm_forward(&z, cout, bn, opts.batch_stats, cfg);
        running.extend(norm.running);
        x = norm.y.iter().map(|&v| gelu(v)).collect();
        convs.push(ConvCache { col, zhat: norm.zhat, inv_std: norm.inv_std, pre: norm.y });
    }
    let chans = branch.conv.last().map_or(batch.input_dim, |c| c.out_channels());
    let segs = cfg.pool_segments;
    let width = chans * (segs + 2);
    let mut pooled = Vec::with_capacity(rows * width);
    let mut argmax = Vec::with_capacity(rows * chans);
    let bounds = segment_bounds(len, segs);
    for b in 0..rows {
        let map = &x[b * len * chans..(b + 1) * len * chans];
        let local = local_segment_pool(map, len, chans, segs);
        let mut global = vec![0.0; chans];
        for t in 0..len {
            for (g, v) in global.iter_mut().zip(&map[t * chans..(t + 1) * chans]) {
                *g += v;
            }
        }
        pooled.extend(global.iter().map(|g| g / len as f64));
        for seg in &local {
            pooled.extend_from_slice(seg);
        }
        for c in 0..chans {
            let mut best = 0;
            for t in 1..len {
                if map[t * chans + c] > map[best * chans + c] {
                    best = t;
                }
            }
            argmax.push(best);
            pooled.push(map[best * chans + c]);
        }
    }
    debug_assert_eq!(bounds.len(), segs);
    let out = linear_forward(&pooled, rows, &branch.proj);
    (out, TemporalCache { convs, argmax, pooled })
}

#[allow(clippy::too_many_arguments)]
fn temporal_backward(
    branch: &TemporalBranch,
    grad: &mut TemporalBranch,
    cache: &TemporalCache,
    dout: &[f64],
    rows: usize,
    len: usize,
    cfg: &ModelConfig,
    opts: ForwardOptions,
) {
    let dpooled = linear_backward(&cache.pooled, dout, rows, &branch.proj, &mut grad.proj, true).unwrap();
    let chans = branch.conv.last().unwrap().out_channels();
    let segs = cfg.pool_segments;
    let width = chans * (segs + 2);
    let bounds = segment_bounds(len, segs);
    let mut dx = vec![0.0; rows * len * chans];
    for b in 0..rows {
        let dp = &dpooled[b * width..(b + 1) * width];
        let dmap = &mut dx[b * len * chans..(b + 1) * len * chans];
        for (j, &(s0, s1)) in bounds.iter().enumerate() {
            let inv = 1.0 / (s1 - s0) as f64;
            for t in s0..s1 {
                for c in 0..chans {
                    dmap[t * chans + c] += dp[c] / len as f64 + dp[(j + 1) * chans + c] * inv;
                }
            }
        }
        for c in 0..chans {
            let t = cache.argmax[b * chans + c];
            dmap[t * chans + c] += dp[(segs + 1) * chans + c];
        }
    }
    for l in (0..branch.conv.len()).rev() {
        let conv = &branch.conv[l];
        let cc = &cache.convs[l];
        let (k, cin, cout) = (conv.kernel(), conv.in_channels(), conv.out_channels());
        gelu_backward(&mut dx, &cc.pre);
        let dz = batch_norm_backward(&dx, &cc.zhat, &cc.inv_std, cout, &branch.norm[l], &mut grad.norm[l], opts.batch_stats);
        let g = &mut grad.conv[l];
        gemm(MatRef::new(&cc.col, rows * len, k * cin).t(), MatRef::new(&dz, rows * len, cout), &mut g.weight.data, true);
        for (gb, s) in g.bias.data.iter_mut().zip(column_sums(&dz, cout)) {
            *gb += s;
        }
        if l > 0 {
            let mut dcol = vec![0.0; rows * len * k * cin];
            gemm(MatRef::new(&dz, rows * len, cout), MatRef::new(&conv.weight.data, k * cin, cout).t(), &mut dcol, false);
            dx = col2im(&dcol, rows, len, cin, k);
        }
    }
}

/// Runs the network on a batch. Returns one logit per row and the cache for
/// [`backward`]. The rng is only consulted when dropout is active.
pub fn forward(batch: &Batch, params: &ModelParams, mode: Mode, rng: &mut impl Rng) -> Result<(Vec<f64>, ForwardCache)> {
    forward_with(batch, params, mode.into(), rng)
}

pub fn forward_with(batch: &Batch, params: &ModelParams, opts: ForwardOptions, rng: &mut impl Rng) -> Result<(Vec<f64>, ForwardCache)> {
    check_shapes(batch, params)?;
    let cfg = &params.config;
    let rows = batch.len;
    if opts.batch_stats && rows < 2 && (params.temporal.is_some() || params.stat.is_some()) {
        return Err(Error::ShapeMismatch("batch statistics need at least 2 rows".into()));
    }
    let mut running = Vec::new();
    let mut parts: Vec<(Vec<f64>, usize)> = Vec::new();

    let temporal = params.temporal.as_ref().map(|t| {
        let (out, cache) = temporal_forward(t, batch, cfg, opts, &mut running);
        parts.push((out, cfg.temporal_dim));
        cache
    });
    let region = params.region.as_ref().map(|r| {
        let pre = linear_forward(&batch.region, rows, &r.fc1);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        parts.push((linear_forward(&act, rows, &r.fc2), r.fc2.out_dim()));
        RegionCache { input: batch.region.clone(), pre, act }
    });
    let stat = params.stat.as_ref().map(|s| {
        let z = linear_forward(&batch.stats, rows, &s.fc1);
        let norm = batch_norm_forward(&z, s.fc1.out_dim(), &s.norm, opts.batch_stats, cfg);
        running.extend(norm.running);
        let act: Vec<f64> = norm.y.iter().map(|&v| gelu(v)).collect();
        parts.push((linear_forward(&act, rows, &s.fc2), s.fc2.out_dim()));
        StatCache { input: batch.stats.clone(), zhat: norm.zhat, inv_std: norm.inv_std, pre: norm.y, act }
    });

    let fused_width: usize = parts.iter().map(|p| p.1).sum();
    let mut h = Vec::with_capacity(rows * fused_width);
    for b in 0..rows {
        for (data, w) in &parts {
            h.extend_from_slice(&data[b * w..(b + 1) * w]);
        }
    }

    let mut head = HeadCache { inputs: Vec::new(), masks: Vec::new(), pre: Vec::new() };
    let n_head = params.head.len();
    for (i, layer) in params.head.iter().enumerate() {
        let mask = (opts.dropout && cfg.dropout > 0.0).then(|| dropout_mask(h.len(), cfg.dropout, rng));
        if let Some(m) = &mask {
            h.iter_mut().zip(m).for_each(|(x, m)| *x *= m);
        }
        let z = linear_forward(&h, rows, layer);
        head.inputs.push(std::mem::take(&mut h));
        head.masks.push(mask);
        if i + 1 < n_head {
            h = z.iter().map(|&v| gelu(v)).collect();
            head.pre.push(z);
        } else {
            h = z;
        }
    }
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteActivation("logit"));
    }
    let cache =
        ForwardCache { step: params.step, rows, window_len: batch.window_len, options: opts, temporal, region, stat, head, running };
    Ok((h, cache))
}

/// Eval-mode logits.
pub fn predict(batch: &Batch, params: &ModelParams) -> Result<Vec<f64>> {
    // Eval mode never draws from the generator.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(forward(batch, params, Mode::Eval, &mut rng)?.0)
}

/// Exact gradients of a scalar loss given `dlogits`, its derivative with
/// respect to each logit of the cached forward.
pub fn backward(cache: &ForwardCache, params: &ModelParams, dlogits: &[f64]) -> Result<Gradients> {
    if cache.step != params.step {
        return Err(Error::StaleCache { cache: cache.step, params: params.step });
    }
    if dlogits.len() != cache.rows {
        return Err(Error::ShapeMismatch(format!("{} logit gradients for a batch of {}", dlogits.len(), cache.rows)));
    }
    let cfg = &params.config;
    let rows = cache.rows;
    let mut grad = params.zeros_like();
    let mut dh = dlogits.to_vec();
    for i in (0..params.head.len()).rev() {
        let want_dx = true;
        let mut dx = linear_backward(&cache.head.inputs[i], &dh, rows, &params.head[i], &mut grad.head[i], want_dx).unwrap();
        if let Some(m) = &cache.head.masks[i] {
            dx.iter_mut().zip(m).for_each(|(d, m)| *d *= m);
        }
        if i > 0 {
            gelu_backward(&mut dx, &cache.head.pre[i - 1]);
        }
        dh = dx;
    }
    let fused = dh;
    let fused_width = cfg.fusion_width();
    let mut offset = 0;
    let mut slice_of = |w: usize| {
        let mut out = Vec::with_capacity(rows * w);
        for b in 0..rows {
            out.extend_from_slice(&fused[b * fused_width + offset..b * fused_width + offset + w]);
        }
        offset += w;
        out
    };
    let d_temporal = params.temporal.as_ref().map(|_| slice_of(cfg.temporal_dim));
    let d_region = params.region.as_ref().map(|r| slice_of(r.fc2.out_dim()));
    let d_stat = params.stat.as_ref().map(|s| slice_of(s.fc2.out_dim()));

    if let (Some(branch), Some(g), Some(c), Some(d)) = (&params.temporal, &mut grad.temporal, &cache.temporal, d_temporal) {
        temporal_backward(branch, g, c, &d, rows, cache.window_len, cfg, cache.options);
    }
    if let (Some(branch), Some(g), Some(c), Some(d)) = (&params.region, &mut grad.region, &cache.region, d_region) {
        let mut da = linear_backward(&c.act, &d, rows, &branch.fc2, &mut g.fc2, true).unwrap();
        gelu_backward(&mut da, &c.pre);
        linear_backward(&c.input, &da, rows, &branch.fc1, &mut g.fc1, false);
    }
    if let (Some(branch), Some(g), Some(c), Some(d)) = (&params.stat, &mut grad.stat, &cache.stat, d_stat) {
        let mut da = linear_backward(&c.act, &d, rows, &branch.fc2, &mut g.fc2, true).unwrap();
        gelu_backward(&mut da, &c.pre);
        let dz = batch_norm_backward(&da, &c.zhat, &c.inv_std, branch.fc1.out_dim(), &branch.norm, &mut g.norm, cache.options.batch_stats);
        linear_backward(&c.input, &dz, rows, &branch.fc1, &mut g.fc1, false);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rows: usize, len: usize, dim: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        Batch {
            len: rows,
            window_len: len,
            input_dim: dim,
            temporal: gen(rows * len * dim),
            stats: gen(rows * dim),
            region: gen(rows * REGION_DIM),
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            conv_channels: vec![5, 4, 3],
            temporal_dim: 4,
            region_hidden: 3,
            region_dim: 3,
            stat_hidden: 5,
            stat_dim: 2,
            head_hidden: vec![4, 3],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_parameter_count() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        assert_eq!(p.trainable_count(), 302_145);
        let mut per_layer = std::collections::BTreeMap::new();
        p.for_each(|name, kind, t| {
            if kind.is_trainable() {
                let layer = name.rsplit_once('.').unwrap().0.to_string();
                *per_layer.entry(layer).or_insert(0) += t.len();
            }
        });
        assert_eq!(per_layer["temporal.conv0"], 98_432);
        assert_eq!(per_layer["temporal.conv1"], 49_280);
        assert_eq!(per_layer["temporal.conv2"], 24_640);
        assert_eq!(per_layer["temporal.bn2"], 128);
        assert_eq!(per_layer["temporal.proj"], 49_280);
        assert_eq!(per_layer["head.fc1"] + per_layer["head.fc2"] + per_layer["head.fc3"], 37_121);
    }

    #[test]
    fn single_order_variant_width() {
        let features = FeatureConfig { orders: vec![2], ..FeatureConfig::default() };
        let cfg = ModelConfig::for_features(&features);
        assert_eq!(cfg.input_dim, 64);
        let p = ModelParams::zeros(&cfg).unwrap();
        assert_eq!(p.temporal.as_ref().unwrap().conv[0].weight.shape, vec![3, 64, 128]);
    }

    #[test]
    fn zero_params_give_zero_logit() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        let batch = random_batch(3, 25, 256, 1);
        let logits = predict(&batch, &p).unwrap();
        assert!(logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn eval_rows_are_batch_invariant() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let batch = random_batch(5, 25, 256, 2);
        let all = predict(&batch, &p).unwrap();
        for row in [0, 4] {
            let one = Batch {
                len: 1,
                window_len: 25,
                input_dim: 256,
                temporal: batch.temporal[row * 25 * 256..(row + 1) * 25 * 256].to_vec(),
                stats: batch.stats[row * 256..(row + 1) * 256].to_vec(),
                region: batch.region[row * 8..(row + 1) * 8].to_vec(),
            };
            assert_eq!(predict(&one, &p).unwrap()[0], all[row]);
        }
        assert_eq!(predict(&batch, &p).unwrap(), all);
    }

    #[test]
    fn repeated_rows_get_identical_logits() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let one = random_batch(1, 25, 256, 9);
        let rep =
            Batch { len: 3, temporal: one.temporal.repeat(3), stats: one.stats.repeat(3), region: one.region.repeat(3), ..one.clone() };
        let logits = predict(&rep, &p).unwrap();
        assert!(logits[0] == logits[1] && logits[1] == logits[2]);
    }

    #[test]
    fn segment_partition() {
        assert_eq!(segment_bounds(24, 4), vec![(0, 6), (6, 12), (12, 18), (18, 24)]);
        assert_eq!(segment_bounds(25, 4), vec![(0, 6), (6, 12), (12, 18), (18, 25)]);
        let map = vec![2.5; 25 * 3];
        for seg in local_segment_pool(&map, 25, 3, 4) {
            assert!(seg.iter().all(|&m| (m - 2.5).abs() < 1e-15));
        }
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let layer = Linear { weight: Tensor { shape: vec![2, 3], data: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6] }, bias: Tensor::zeros(&[3]) };
        let mut grad = Linear::zeros(2, 3);
        let x = [1.5, -2.0];
        let g = [0.3, -1.0, 2.0];
        let dx = linear_backward(&x, &g, 1, &layer, &mut grad, true).unwrap();
        for (i, xi) in x.iter().enumerate() {
            for (o, go) in g.iter().enumerate() {
                assert!((grad.weight.data[i * 3 + o] - xi * go).abs() < 1e-15);
            }
        }
        assert!((dx[0] - (0.1 * 0.3 - 0.2 + 0.3 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = random_batch(3, 7, 6, 5);
        let (_, cache) = forward(&batch, &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let g = backward(&cache, &p, &[0.0; 3]).unwrap();
        g.for_each(|_, _, t| assert!(t.data.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let cfg = small_config();
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = random_batch(2, 7, 6, 5);
        let (_, cache) = forward(&batch, &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        p.step += 1;
        assert!(matches!(backward(&cache, &p, &[1.0, 1.0]), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let cfg = small_config();
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = random_batch(1, 7, 6, 5);
        assert!(forward(&batch, &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).is_err());
        assert!(forward(&batch, &p, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).is_ok());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = ModelParams::zeros(&ModelConfig::default()).unwrap();
        let batch = random_batch(2, 25, 64, 1);
        assert!(matches!(predict(&batch, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let cfg = small_config();
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = random_batch(4, 7, 6, 5);
        let (_, cache) = forward(&batch, &p, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = p.stat.as_ref().unwrap().norm.running_mean.data.clone();
        p.apply_running_stats(&cache);
        let after = &p.stat.as_ref().unwrap().norm.running_mean.data;
        // Starting from zero, the new running mean is 0.1 * batch mean.
        assert!(before.iter().all(|&x| x == 0.0));
        let z = linear_forward(&batch.stats, 4, &p.stat.as_ref().unwrap().fc1);
        let mean = column_sums(&z, 5);
        for (a, m) in after.iter().zip(mean) {
            assert!((a - 0.1 * m / 4.0).abs() < 1e-12);
        }
    }
}
