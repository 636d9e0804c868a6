//! Sliding-window kinematic features.
//!
//! Every window yields three representations of the same landmark motion:
//!
//! * a temporal matrix, one row per frame, holding the coordinate and its
//!   first three finite differences (front-padded to full length);
//! * a statistical vector with the population standard deviation of each of
//!   those series;
//! * an 8-dimensional vector of region amplitude ratios.
//!
//! Columns are grouped order-major: all landmarks of order 0 on the first
//! enabled axis, then the next axis, then order 1, and so on. Landmark order
//! follows the sequence header.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::trajectory::{Label, NormalizedSequence, Point, RegionIndex, N_LANDMARKS};

/// Denominator guard for region ratios.
pub const RATIO_EPS: f64 = 1e-9;
/// Upper clamp applied when a ratio's denominator vanishes.
pub const RATIO_CLAMP: f64 = 1e6;
pub const REGION_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub window_len: usize,
    pub stride: usize,
    pub axes: Vec<Axis>,
    /// Finite-difference orders, 0 (displacement) through 3 (jerk).
    pub orders: Vec<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { window_len: 25, stride: 5, axes: vec![Axis::Y], orders: vec![0, 1, 2, 3] }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.stride == 0 {
            return bad("stride must be at least 1".into());
        }
        if self.axes.is_empty() || self.orders.is_empty() {
            return bad("axis and order masks must be nonempty".into());
        }
        if !self.axes.windows(2).all(|w| w[0] < w[1]) {
            return bad("axes must be sorted and unique".into());
        }
        if !self.orders.windows(2).all(|w| w[0] < w[1]) {
            return bad("orders must be sorted and unique".into());
        }
        let max_order = *self.orders.last().unwrap();
        if max_order > 3 {
            return bad(format!("order {max_order} is not supported (0..=3)"));
        }
        if self.window_len < (max_order + 1).max(2) {
            return bad(format!("window_len {} too short for order {max_order}", self.window_len));
        }
        Ok(())
    }

    /// Width of the statistical vector and of each temporal row.
    pub fn feature_dim(&self) -> usize {
        N_LANDMARKS * self.axes.len() * self.orders.len()
    }

    pub fn column(&self, order_slot: usize, axis_slot: usize, landmark: usize) -> usize {
        (order_slot * self.axes.len() + axis_slot) * N_LANDMARKS + landmark
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFeatures {
    pub video_id: String,
    pub window_start: usize,
    /// Row-major `window_len x feature_dim`.
    pub temporal: Vec<f64>,
    pub stats: Vec<f64>,
    pub region: [f64; REGION_DIM],
    pub label: Option<Label>,
}

/// Window start offsets: `0, stride, 2*stride, ...` while the window fits.
pub fn windows(len: usize, cfg: &FeatureConfig) -> Result<Vec<usize>> {
    if len < cfg.window_len {
        return Err(Error::SequenceTooShort { len, window: cfg.window_len });
    }
    let count = (len - cfg.window_len) / cfg.stride + 1;
    Ok((0..count).map(|k| k * cfg.stride).collect())
}

/// k-th forward difference; length `series.len() - k`.
pub fn finite_difference(series: &[f64], order: usize) -> Vec<f64> {
    let mut cur = series.to_vec();
    for _ in 0..order {
        cur = cur.windows(2).map(|w| w[1] - w[0]).collect();
    }
    cur
}

/// Population standard deviation (divides by n).
pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    // Shifting by the first sample makes a constant series exactly zero.
    let n = xs.len() as f64;
    let x0 = xs[0];
    let mean = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    (xs.iter().map(|x| (x - x0 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn coordinate_series(window: &[Vec<Point>], landmark: usize, axis: Axis) -> Vec<f64> {
    window.iter().map(|f| f[landmark][axis.index()]).collect()
}

/// Statistical vector of one window.
pub fn kinematic_stats(window: &[Vec<Point>], cfg: &FeatureConfig) -> Vec<f64> {
    let mut out = vec![0.0; cfg.feature_dim()];
    for (a_slot, &axis) in cfg.axes.iter().enumerate() {
        for lm in 0..N_LANDMARKS {
            let series = coordinate_series(window, lm, axis);
            for (o_slot, &order) in cfg.orders.iter().enumerate() {
                out[cfg.column(o_slot, a_slot, lm)] = population_std(&finite_difference(&series, order));
            }
        }
    }
    out
}

/// Temporal matrix of one window. A k-th difference series is padded at
/// the front with its first value so row t describes motion ending at t.
pub fn temporal_tensor(window: &[Vec<Point>], cfg: &FeatureConfig) -> Vec<f64> {
    let t_len = window.len();
    let dim = cfg.feature_dim();
    let mut out = vec![0.0; t_len * dim];
    for (a_slot, &axis) in cfg.axes.iter().enumerate() {
        for lm in 0..N_LANDMARKS {
            let series = coordinate_series(window, lm, axis);
            for (o_slot, &order) in cfg.orders.iter().enumerate() {
                let diff = finite_difference(&series, order);
                let col = cfg.column(o_slot, a_slot, lm);
                for t in 0..t_len {
                    out[t * dim + col] = diff[t.saturating_sub(order)];
                }
            }
        }
    }
    out
}

fn guarded_ratio(num: f64, den: f64) -> f64 {
    if den < RATIO_EPS {
        if num < RATIO_EPS {
            1.0
        } else {
            (num / RATIO_EPS).min(RATIO_CLAMP)
        }
    } else {
        num / den
    }
}

/// Region amplitude vector from the mean y-displacement std of each region.
pub fn region_ratios_from_means(li: f64, lo: f64, up: f64, pe: f64) -> [f64; REGION_DIM] {
    let sum = li + up;
    let normalized_diff = if sum < RATIO_EPS { 0.0 } else { (li - up) / sum };
    [
        guarded_ratio(li, up),
        guarded_ratio(lo, up),
        guarded_ratio(li, lo),
        guarded_ratio(pe, up),
        guarded_ratio(li, pe),
        li,
        up,
        normalized_diff,
    ]
}

/// Mean y-displacement std per region: lower inner, lower outer, upper, perioral.
pub fn region_means(window: &[Vec<Point>], regions: &RegionIndex) -> [f64; 4] {
    let mean_std =
        |idx: &[usize]| idx.iter().map(|&lm| population_std(&coordinate_series(window, lm, Axis::Y))).sum::<f64>() / idx.len() as f64;
    [mean_std(&regions.lower_inner), mean_std(&regions.lower_outer), mean_std(&regions.upper), mean_std(&regions.perioral)]
}

pub fn region_ratios(window: &[Vec<Point>], regions: &RegionIndex) -> [f64; REGION_DIM] {
    let [li, lo, up, pe] = region_means(window, regions);
    region_ratios_from_means(li, lo, up, pe)
}

/// Features for every window of a sequence.
pub fn extract(seq: &NormalizedSequence, cfg: &FeatureConfig, regions: &RegionIndex) -> Result<Vec<WindowFeatures>> {
    cfg.validate()?;
    let starts = windows(seq.len(), cfg)?;
    Ok(starts
        .into_iter()
        .map(|start| {
            let w = &seq.frames[start..start + cfg.window_len];
            WindowFeatures {
                video_id: seq.video_id.clone(),
                window_start: start,
                temporal: temporal_tensor(w, cfg),
                stats: kinematic_stats(w, cfg),
                region: region_ratios(w, regions),
                label: seq.label,
            }
        })
        .collect())
}

/// Features of many sequences, one vector per sequence, in input order.
pub fn extract_all(seqs: &[NormalizedSequence], cfg: &FeatureConfig, regions: &RegionIndex) -> Result<Vec<Vec<WindowFeatures>>> {
    exec::map(seqs, |s| extract(s, cfg, regions)).into_iter().collect()
}

/// Per-window mean over landmarks of the y-axis std at each order 0..=3.
/// This is the per-window summary used for effect-size analysis.
pub fn window_order_means(window: &[Vec<Point>]) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for lm in 0..N_LANDMARKS {
        let series = coordinate_series(window, lm, Axis::Y);
        for (k, slot) in acc.iter_mut().enumerate() {
            *slot += population_std(&finite_difference(&series, k));
        }
    }
    acc.map(|s| s / N_LANDMARKS as f64)
}

/// Per-window order means for every window of a sequence.
pub fn sequence_order_means(seq: &NormalizedSequence, cfg: &FeatureConfig) -> Result<Vec<[f64; 4]>> {
    Ok(windows(seq.len(), cfg)?.into_iter().map(|s| window_order_means(&seq.frames[s..s + cfg.window_len])).collect())
}

const CACHE_MAGIC: &[u8; 8] = b"BLIPFEAT";
const CACHE_VERSION: u16 = 1;

/// Feature cache layout (all little-endian):
///
/// * header, 16 bytes: magic `BLIPFEAT`, version `u16`, window length `u16`,
///   feature dim `u32`;
/// * records of `f32`: video ordinal, window start, label (0, 1 or -1),
///   the temporal matrix row-major, the statistical vector, the region vector.
pub fn write_cache<W: Write>(out: &mut W, cfg: &FeatureConfig, videos: &[Vec<WindowFeatures>]) -> Result<()> {
    let io = |e| Error::io("<feature cache>", e);
    let window_len = u16::try_from(cfg.window_len).map_err(|_| Error::FeatureCache("window too long".into()))?;
    out.write_all(CACHE_MAGIC).map_err(io)?;
    out.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&window_len.to_le_bytes()).map_err(io)?;
    out.write_all(&(cfg.feature_dim() as u32).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for (ordinal, video) in videos.iter().enumerate() {
        for w in video {
            buf.clear();
            buf.push(ordinal as f32);
            buf.push(w.window_start as f32);
            buf.push(w.label.map_or(-1.0, |l| l.bit() as f32));
            buf.extend(w.temporal.iter().map(|&x| x as f32));
            buf.extend(w.stats.iter().map(|&x| x as f32));
            buf.extend(w.region.iter().map(|&x| x as f32));
            for x in &buf {
                out.write_all(&x.to_le_bytes()).map_err(io)?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CachedWindow {
    pub video_ordinal: usize,
    pub window_start: usize,
    pub label: Option<Label>,
    pub temporal: Vec<f32>,
    pub stats: Vec<f32>,
    pub region: [f32; REGION_DIM],
}

pub fn read_cache<R: Read>(input: &mut R) -> Result<(usize, usize, Vec<CachedWindow>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes).map_err(|e| Error::io("<feature cache>", e))?;
    if bytes.len() < 16 || &bytes[..8] != CACHE_MAGIC {
        return Err(Error::FeatureCache("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != CACHE_VERSION {
        return Err(Error::FeatureCache(format!("unsupported version {version}")));
    }
    let window_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let record = 3 + window_len * dim + dim + REGION_DIM;
    let body = &bytes[16..];
    if body.len() % (record * 4) != 0 {
        return Err(Error::FeatureCache("truncated record".into()));
    }
    let floats: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let windows = floats
        .chunks_exact(record)
        .map(|r| {
            let t_end = 3 + window_len * dim;
            CachedWindow {
                video_ordinal: r[0] as usize,
                window_start: r[1] as usize,
                label: if r[2] < 0.0 { None } else { Label::from_bit(r[2] as u64) },
                temporal: r[3..t_end].to_vec(),
                stats: r[t_end..t_end + dim].to_vec(),
                region: r[t_end + dim..].try_into().unwrap(),
            }
        })
        .collect();
    Ok((window_len, dim, windows))
}
