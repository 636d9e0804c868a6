//! Sequences plus their window features, as consumed by training and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::Result;
use crate::evaluation::{score_videos, window_logits, ScoredVideo};
use crate::exec;
use crate::kinematics::{extract, FeatureConfig, WindowFeatures};
use crate::network::ModelParams;
use crate::trajectory::{filter_all, load_dir, NormalizedSequence, RegionMap, TrajectorySequence, MIN_VALID_RUN};

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub sequences: Vec<NormalizedSequence>,
    /// Windows of every accepted sequence, grouped by sequence in order.
    pub windows: Vec<WindowFeatures>,
    /// Video id to reason, for inputs that produced no windows.
    pub skipped: BTreeMap<String, String>,
    pub off_nominal_fps: Vec<String>,
}

impl Dataset {
    pub fn from_sequences(seqs: Vec<NormalizedSequence>, cfg: &FeatureConfig, map: &RegionMap) -> Result<Self> {
        cfg.validate()?;
        map.validate()?;
        let extracted = exec::map(&seqs, |s| map.resolve(&s.landmark_ids).and_then(|idx| extract(s, cfg, &idx)));
        let mut out = Dataset::default();
        for (seq, res) in seqs.into_iter().zip(extracted) {
            match res {
                Ok(ws) => {
                    out.windows.extend(ws);
                    out.sequences.push(seq);
                }
                Err(e) => {
                    out.skipped.insert(seq.video_id.clone(), e.to_string());
                }
            }
        }
        Ok(out)
    }

    /// Filters raw trajectories then extracts features.
    pub fn from_trajectories(raw: &[TrajectorySequence], cfg: &FeatureConfig, map: &RegionMap) -> Result<Self> {
        let report = filter_all(raw, MIN_VALID_RUN);
        let mut out = Self::from_sequences(report.accepted, cfg, map)?;
        out.skipped.extend(report.rejected);
        out.off_nominal_fps = report.off_nominal_fps;
        Ok(out)
    }

    /// Loads every `.jsonl` file of a directory.
    pub fn load(dir: &Path, cfg: &FeatureConfig, map: &RegionMap) -> Result<Self> {
        Self::from_trajectories(&load_dir(dir)?, cfg, map)
    }

    /// Eval-mode video scores with generator tags attached.
    pub fn score(&self, params: &ModelParams, batch_size: usize) -> Result<Vec<ScoredVideo>> {
        let logits = window_logits(params, &self.windows, batch_size)?;
        let mut videos = score_videos(&self.windows, &logits)?;
        let tags: HashMap<&str, &Option<String>> = self.sequences.iter().map(|s| (s.video_id.as_str(), &s.generator_tag)).collect();
        for v in &mut videos {
            v.generator_tag = tags.get(v.video_id.as_str()).and_then(|t| (*t).clone());
        }
        Ok(videos)
    }

    pub fn has_both_classes(&self) -> bool {
        let fake = self.windows.iter().filter(|w| w.label.is_some_and(|l| l.is_fake())).count();
        let real = self.windows.iter().filter(|w| w.label.is_some_and(|l| !l.is_fake())).count();
        fake > 0 && real > 0
    }
}
