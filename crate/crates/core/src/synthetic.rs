//! Synthetic trajectories with known ground truth.
//!
//! Smooth sequences are chains of minimum-jerk point-to-point movements of
//! a shared articulator signal, spread over the 64 landmarks with region
//! gains, per-landmark gains and fractional phase lags. Jittery sequences
//! add per-frame coordinate noise to the same smooth motion.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::kinematics::Axis;
use crate::perturbation::{derive_seed, splitmix64};
use crate::trajectory::{save_trajectory, Label, NormalizedSequence, Point, Region, RegionMap, N_LANDMARKS};

pub const SMOOTH_TAG: &str = "synth_smooth";
pub const JITTER_TAG: &str = "synth_jitter";
pub const SMOOTHED_JITTER_TAG: &str = "synth_jitter_smoothed";

const JITTER_SALT: u64 = 0x6a69_7474_6572_0001;

/// Per-frame generation error model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum JitterMode {
    /// Independent Gaussian noise per frame.
    White,
    /// White noise through the unity-gain one-pole low-pass
    /// `e[t] = a*e[t-1] + (1-a)*w[t]`, started from its stationary law.
    Smoothed { coefficient: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionGains {
    pub lower_inner: f64,
    pub lower_outer: f64,
    pub upper: f64,
    pub perioral: f64,
}

impl RegionGains {
    pub fn get(&self, region: Region) -> f64 {
        match region {
            Region::LowerInner => self.lower_inner,
            Region::LowerOuter => self.lower_outer,
            Region::Upper => self.upper,
            Region::Perioral => self.perioral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub fps: f64,
    /// Range of movement amplitudes in normalized units.
    pub amplitude: [f64; 2],
    /// Range of movement durations in frames.
    pub duration: [usize; 2],
    pub jitter_sigma: f64,
    pub jitter_mode: JitterMode,
    pub jitter_axes: Vec<Axis>,
    pub region_gains: RegionGains,
    /// Range of per-landmark gains.
    pub landmark_gain: [f64; 2],
    /// Largest per-landmark phase lag in frames.
    pub max_lag: f64,
    /// Horizontal and depth motion relative to vertical.
    pub x_scale: f64,
    pub z_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_frames: 100,
            fps: 25.0,
            amplitude: [0.02, 0.08],
            duration: [6, 15],
            jitter_sigma: 0.01,
            jitter_mode: JitterMode::White,
            jitter_axes: vec![Axis::X, Axis::Y, Axis::Z],
            region_gains: RegionGains { lower_inner: 1.0, lower_outer: 0.9, upper: 0.6, perioral: 0.4 },
            landmark_gain: [0.8, 1.2],
            max_lag: 1.5,
            x_scale: 0.3,
            z_scale: 0.2,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_frames == 0 || !(self.fps > 0.0) {
            return bad("n_frames and fps must be positive");
        }
        if !(self.amplitude[0] > 0.0 && self.amplitude[0] <= self.amplitude[1]) {
            return bad("amplitudes must be positive and ordered");
        }
        if self.duration[0] < 4 || self.duration[0] > self.duration[1] {
            return bad("durations must be at least 4 frames and ordered");
        }
        if !(self.jitter_sigma >= 0.0) {
            return bad("jitter_sigma must be non-negative");
        }
        if let JitterMode::Smoothed { coefficient } = self.jitter_mode {
            if !(0.0..1.0).contains(&coefficient) {
                return bad("smoothing coefficient must lie in [0, 1)");
            }
        }
        if !(self.landmark_gain[0] > 0.0 && self.landmark_gain[0] <= self.landmark_gain[1]) || self.max_lag < 0.0 {
            return bad("landmark gains must be positive and ordered; max_lag non-negative");
        }
        Ok(())
    }
}

/// Minimum-jerk position profile `10t^3 - 15t^4 + 6t^5` on `[0, 1]`.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Chain of point-to-point movements alternating between open and near-closed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Articulator {
    /// `(start_time, duration, start_position, displacement)` per movement.
    pub segments: Vec<(f64, f64, f64, f64)>,
}

impl Articulator {
    /// Movements covering `[start, end]` in frame units.
    pub fn generate(cfg: &SynthConfig, start: f64, end: f64, rng: &mut impl Rng) -> Self {
        let mut segments = Vec::new();
        let mut t = start;
        let mut pos = 0.0;
        let mut opening = true;
        while t <= end {
            let dur = rng.random_range(cfg.duration[0]..=cfg.duration[1]) as f64;
            let target = if opening {
                rng.random_range(cfg.amplitude[0]..=cfg.amplitude[1])
            } else {
                rng.random_range(0.0..=0.2 * cfg.amplitude[0])
            };
            segments.push((t, dur, pos, target - pos));
            pos = target;
            t += dur;
            opening = !opening;
        }
        Articulator { segments }
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn position(&self, t: f64) -> f64 {
        let i = self.segments.partition_point(|s| s.0 <= t).saturating_sub(1);
        let (t0, dur, y0, dy) = self.segments[i];
        y0 + dy * min_jerk((t - t0) / dur)
    }
}

struct Landmark {
    base: Point,
    gain: f64,
    lag: f64,
    /// Vertical direction: upper-lip points move opposite to the jaw.
    dir: f64,
    x_dir: f64,
}

fn layout(region_of: &[Region], cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Landmark> {
    region_of
        .iter()
        .enumerate()
        .map(|(i, &region)| {
            let angle = std::f64::consts::TAU * i as f64 / N_LANDMARKS as f64;
            let radius = match region {
                Region::LowerInner => 0.3,
                Region::LowerOuter => 0.4,
                Region::Upper => 0.35,
                Region::Perioral => 0.55,
            };
            let sign = if region == Region::Upper { -1.0 } else { 1.0 };
            let base = [radius * angle.cos(), sign * 0.5 * radius * angle.sin().abs(), 0.05 * angle.sin()];
            Landmark {
                base,
                gain: cfg.region_gains.get(region) * rng.random_range(cfg.landmark_gain[0]..=cfg.landmark_gain[1]),
                lag: rng.random_range(0.0..=cfg.max_lag),
                dir: sign,
                x_dir: if angle.cos() >= 0.0 { 1.0 } else { -1.0 },
            }
        })
        .collect()
}

fn region_assignment(map: &RegionMap) -> Result<(Vec<u32>, Vec<Region>)> {
    let ids = map.landmark_ids();
    let index = map.resolve(&ids)?;
    let mut region_of = vec![Region::Perioral; ids.len()];
    for region in Region::ALL {
        for &pos in index.get(region) {
            region_of[pos] = region;
        }
    }
    Ok((ids, region_of))
}

/// A smooth (real-labelled) sequence, already in normalized coordinates.
pub fn gen_smooth(cfg: &SynthConfig, seed: u64) -> Result<NormalizedSequence> {
    cfg.validate()?;
    let (ids, region_of) = region_assignment(&RegionMap::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let landmarks = layout(&region_of, cfg, &mut rng);
    let n = cfg.n_frames as f64;
    let art = Articulator::generate(cfg, -cfg.max_lag - 1.0, n, &mut rng);
    let frames = (0..cfg.n_frames)
        .map(|t| {
            landmarks
                .iter()
                .map(|lm| {
                    let g = lm.gain * art.position(t as f64 - lm.lag);
                    [lm.base[0] + cfg.x_scale * lm.x_dir * g, lm.base[1] + lm.dir * g, lm.base[2] + cfg.z_scale * g]
                })
                .collect()
        })
        .collect();
    Ok(NormalizedSequence {
        video_id: format!("smooth_{seed:016x}"),
        fps: cfg.fps,
        label: Some(Label::Real),
        generator_tag: Some(SMOOTH_TAG.into()),
        landmark_ids: ids,
        frames,
        retained_indices: (0..cfg.n_frames as u64).collect(),
    })
}

/// Per-frame noise for each landmark and axis, shape `frames x landmarks x 3`.
fn jitter_field(cfg: &SynthConfig, seed: u64) -> Vec<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ JITTER_SALT));
    let sigma = cfg.jitter_sigma;
    let mut noise = vec![vec![[0.0; 3]; N_LANDMARKS]; cfg.n_frames];
    for axis in &cfg.jitter_axes {
        let a = axis.index();
        for lm in 0..N_LANDMARKS {
            let stationary_sd = match cfg.jitter_mode {
                JitterMode::White => 0.0,
                JitterMode::Smoothed { coefficient: c } => ((1.0 - c) / (1.0 + c)).sqrt(),
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut prev = stationary_sd * z;
            for frame in noise.iter_mut() {
                let w: f64 = StandardNormal.sample(&mut rng);
                let e = match cfg.jitter_mode {
                    JitterMode::White => w,
                    JitterMode::Smoothed { coefficient: c } => {
                        prev = c * prev + (1.0 - c) * w;
                        prev
                    }
                };
                frame[lm][a] = sigma * e;
            }
        }
    }
    noise
}

/// The smooth sequence for `seed` plus per-frame jitter (fake-labelled).
pub fn gen_jittery(cfg: &SynthConfig, seed: u64) -> Result<NormalizedSequence> {
    let mut seq = gen_smooth(cfg, seed)?;
    if cfg.jitter_sigma > 0.0 {
        let noise = jitter_field(cfg, seed);
        for (frame, dn) in seq.frames.iter_mut().zip(&noise) {
            for (p, d) in frame.iter_mut().zip(dn) {
                for k in 0..3 {
                    p[k] += d[k];
                }
            }
        }
    }
    let tag = match cfg.jitter_mode {
        JitterMode::White => JITTER_TAG,
        JitterMode::Smoothed { .. } => SMOOTHED_JITTER_TAG,
    };
    seq.video_id = format!("jitter_{seed:016x}");
    seq.label = Some(Label::Fake);
    seq.generator_tag = Some(tag.into());
    Ok(seq)
}

/// Seed of the i-th real or fake sequence of a dataset.
pub fn sequence_seed(base: u64, fake: bool, i: usize) -> u64 {
    derive_seed(base, &format!("{}/{i}", if fake { "fake" } else { "real" }))
}

/// `n_real` smooth then `n_fake` jittery sequences with disjoint seeds.
pub fn gen_sequences(cfg: &SynthConfig, n_real: usize, n_fake: usize, seed: u64) -> Result<Vec<NormalizedSequence>> {
    cfg.validate()?;
    exec::map_range(n_real + n_fake, |i| {
        let fake = i >= n_real;
        let k = if fake { i - n_real } else { i };
        let s = sequence_seed(seed, fake, k);
        let mut seq = if fake { gen_jittery(cfg, s)? } else { gen_smooth(cfg, s)? };
        seq.video_id = format!("{}_{k:05}", if fake { "fake" } else { "real" });
        Ok(seq)
    })
    .into_iter()
    .collect()
}

/// Writes a dataset of Landmark JSONL files into `dir`, one per sequence.
pub fn gen_dataset(cfg: &SynthConfig, n_real: usize, n_fake: usize, seed: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    if n_real == 0 || n_fake == 0 {
        return Err(Error::InvalidInput("dataset needs at least one real and one fake sequence".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seqs = gen_sequences(cfg, n_real, n_fake, seed)?;
    let commissures = RegionMap::default().commissure_ids;
    exec::map(&seqs, |s| {
        let path = dir.join(format!("{}.jsonl", s.video_id));
        save_trajectory(&s.to_trajectory(commissures), &path).map(|_| path)
    })
    .into_iter()
    .collect()
}
