//! Landmark-level robustness perturbations: coordinate noise and frame drops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Axis;
use crate::trajectory::NormalizedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// A dropped frame repeats the last surviving frame.
    #[default]
    HoldLast,
    /// A dropped frame is removed.
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerturbSpec {
    Noise {
        sigma: f64,
        #[serde(default = "all_axes")]
        axes: Vec<Axis>,
        seed: u64,
    },
    FrameDrop {
        rate: f64,
        #[serde(default)]
        drop_mode: DropMode,
        seed: u64,
    },
}

pub fn all_axes() -> Vec<Axis> {
    vec![Axis::X, Axis::Y, Axis::Z]
}

impl PerturbSpec {
    pub fn apply(&self, seq: &NormalizedSequence) -> Result<NormalizedSequence> {
        match self {
            PerturbSpec::Noise { sigma, axes, seed } => inject_noise(seq, *sigma, axes, *seed),
            PerturbSpec::FrameDrop { rate, drop_mode, seed } => drop_frames(seq, *rate, *drop_mode, *seed),
        }
    }
}

/// FNV-1a over the bytes of `s`.
pub fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-sequence seed: `splitmix64(base ^ fnv1a(video_id))`.
pub fn derive_seed(base: u64, video_id: &str) -> u64 {
    splitmix64(base ^ fnv1a(video_id))
}

/// Adds i.i.d. `N(0, sigma^2)` to every selected coordinate of every frame.
pub fn inject_noise(seq: &NormalizedSequence, sigma: f64, axes: &[Axis], seed: u64) -> Result<NormalizedSequence> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!("noise sigma {sigma} must be non-negative")));
    }
    let mut out = seq.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &seq.video_id));
    for frame in &mut out.frames {
        for p in frame.iter_mut() {
            for axis in axes {
                p[axis.index()] += normal.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Drops each frame after the first with probability `rate`.
pub fn drop_frames(seq: &NormalizedSequence, rate: f64, mode: DropMode, seed: u64) -> Result<NormalizedSequence> {
    if rate == 1.0 {
        return Err(Error::DegenerateRate(rate));
    }
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!("drop rate {rate} must lie in [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &seq.video_id));
    let mut out = seq.clone();
    out.frames.clear();
    out.retained_indices.clear();
    for (i, frame) in seq.frames.iter().enumerate() {
        let dropped = i > 0 && rng.random::<f64>() < rate;
        match (dropped, mode) {
            (false, _) => {
                out.frames.push(frame.clone());
                out.retained_indices.push(seq.retained_indices[i]);
            }
            (true, DropMode::HoldLast) => {
                let last = out.frames.last().unwrap().clone();
                out.frames.push(last);
                out.retained_indices.push(seq.retained_indices[i]);
            }
            (true, DropMode::Delete) => {}
        }
    }
    Ok(out)
}
