//! Landmark trajectory ingestion: the Landmark JSONL format, region maps,
//! per-frame mouth normalization and valid-run filtering.
//!
//! A JSONL file holds one header record followed by one record per frame:
//!
//! ```text
//! {"type":"header","video_id":"v0","fps":25,"label":1,"generator":"w2l",
//!  "landmark_ids":[...64 ids...],"commissure_ids":[61,291]}
//! {"type":"frame","i":0,"t_ms":0.0,"valid":true,"pts":[[x,y,z],...64],"cpts":[[x,y,z],[x,y,z]]}
//! ```
//!
//! `pts` follows the order of `landmark_ids`. When a commissure id is not one
//! of the 64 landmark ids its coordinates travel in `cpts` (left, right).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::exec;

pub const N_LANDMARKS: usize = 64;
/// Mouth widths at or below this are detector failures.
pub const MOUTH_WIDTH_EPS: f64 = 1e-6;
/// Shortest contiguous valid run a sequence must contain.
pub const MIN_VALID_RUN: usize = 25;
pub const NOMINAL_FPS: f64 = 25.0;

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn from_bit(bit: u64) -> Option<Label> {
        match bit {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn target(self) -> f64 {
        self.bit() as f64
    }

    pub fn is_fake(self) -> bool {
        self == Label::Fake
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLandmarkFrame {
    pub frame_index: u64,
    pub timestamp_ms: Option<f64>,
    pub valid: bool,
    /// Coordinates aligned with the owning sequence's `landmark_ids`.
    /// May be empty for invalid frames.
    pub points: Vec<Point>,
    /// Left and right commissure coordinates, when known.
    pub commissures: Option<[Point; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySequence {
    pub video_id: String,
    pub fps: f64,
    pub label: Option<Label>,
    pub generator_tag: Option<String>,
    pub landmark_ids: Vec<u32>,
    pub commissure_ids: [u32; 2],
    pub frames: Vec<RawLandmarkFrame>,
    /// Free-form provenance carried through perturbation runs.
    pub perturb: Option<Value>,
    /// Lines that were not parseable records and were skipped.
    pub malformed_lines: usize,
}

impl TrajectorySequence {
    pub fn has_nominal_fps(&self) -> bool {
        (self.fps - NOMINAL_FPS).abs() < 1e-9
    }

    pub fn commissures_external(&self) -> bool {
        self.commissure_ids.iter().any(|id| !self.landmark_ids.contains(id))
    }
}

/// Assignment of the 64 perioral landmark ids to the four anatomical regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMap {
    pub commissure_ids: [u32; 2],
    pub regions: Regions,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regions {
    pub lower_inner: Vec<u32>,
    pub lower_outer: Vec<u32>,
    pub upper: Vec<u32>,
    pub perioral: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    LowerInner,
    LowerOuter,
    Upper,
    Perioral,
}

impl Region {
    pub const ALL: [Region; 4] = [Region::LowerInner, Region::LowerOuter, Region::Upper, Region::Perioral];

    pub fn expected_len(self) -> usize {
        match self {
            Region::LowerInner | Region::LowerOuter => 9,
            Region::Upper => 22,
            Region::Perioral => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::LowerInner => "lower_inner",
            Region::LowerOuter => "lower_outer",
            Region::Upper => "upper",
            Region::Perioral => "perioral",
        }
    }
}

impl Default for RegionMap {
    /// Default map following the face-mesh lips topology, with the mouth
    /// corners 61/291 kept outside the 64-point set. Override per deployment.
    fn default() -> Self {
        RegionMap {
            commissure_ids: [61, 291],
            regions: Regions {
                lower_inner: vec![95, 88, 178, 87, 14, 317, 402, 318, 324],
                lower_outer: vec![146, 91, 181, 84, 17, 314, 405, 321, 375],
                upper: vec![185, 40, 39, 37, 0, 267, 269, 270, 409, 191, 80, 81, 82, 13, 312, 311, 310, 415, 78, 308, 62, 292],
                perioral: vec![
                    164, 167, 165, 92, 186, 57, 43, 106, 182, 83, 18, 313, 406, 335, 273, 287, 410, 322, 391, 393, 202, 204, 422, 424,
                ],
            },
        }
    }
}

impl RegionMap {
    pub fn from_toml(text: &str) -> Result<Self> {
        let map: RegionMap = toml::from_str(text)?;
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("region map serializes")
    }

    pub fn region(&self, region: Region) -> &[u32] {
        match region {
            Region::LowerInner => &self.regions.lower_inner,
            Region::LowerOuter => &self.regions.lower_outer,
            Region::Upper => &self.regions.upper,
            Region::Perioral => &self.regions.perioral,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for region in Region::ALL {
            let ids = self.region(region);
            if ids.len() != region.expected_len() {
                return Err(Error::InvalidConfig(format!(
                    "region {} has {} ids, expected {}",
                    region.name(),
                    ids.len(),
                    region.expected_len()
                )));
            }
            for &id in ids {
                if !seen.insert(id) {
                    return Err(Error::InvalidConfig(format!("landmark id {id} assigned to more than one region")));
                }
            }
        }
        if self.commissure_ids[0] == self.commissure_ids[1] {
            return Err(Error::InvalidConfig("commissure ids must differ".into()));
        }
        Ok(())
    }

    /// The 64 ids in canonical order: lower inner, lower outer, upper, perioral.
    pub fn landmark_ids(&self) -> Vec<u32> {
        Region::ALL.iter().flat_map(|&r| self.region(r).iter().copied()).collect()
    }

    /// Resolves region membership to positions within `landmark_ids`.
    pub fn resolve(&self, landmark_ids: &[u32]) -> Result<RegionIndex> {
        let position: HashMap<u32, usize> = landmark_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let lookup = |region: Region| -> Result<Vec<usize>> {
            self.region(region)
                .iter()
                .map(|id| {
                    position
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidConfig(format!("region map id {id} is not among the sequence landmark ids")))
                })
                .collect()
        };
        if landmark_ids.len() != N_LANDMARKS {
            return Err(Error::InvalidConfig(format!("expected {N_LANDMARKS} landmark ids, got {}", landmark_ids.len())));
        }
        Ok(RegionIndex {
            lower_inner: lookup(Region::LowerInner)?,
            lower_outer: lookup(Region::LowerOuter)?,
            upper: lookup(Region::Upper)?,
            perioral: lookup(Region::Perioral)?,
        })
    }
}

/// Region membership as column positions in a landmark ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionIndex {
    pub lower_inner: Vec<usize>,
    pub lower_outer: Vec<usize>,
    pub upper: Vec<usize>,
    pub perioral: Vec<usize>,
}

impl RegionIndex {
    pub fn get(&self, region: Region) -> &[usize] {
        match region {
            Region::LowerInner => &self.lower_inner,
            Region::LowerOuter => &self.lower_outer,
            Region::Upper => &self.upper,
            Region::Perioral => &self.perioral,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSequence {
    pub video_id: String,
    pub fps: f64,
    pub label: Option<Label>,
    pub generator_tag: Option<String>,
    pub landmark_ids: Vec<u32>,
    /// One entry per retained frame, each with one point per landmark.
    pub frames: Vec<Vec<Point>>,
    pub retained_indices: Vec<u64>,
}

impl NormalizedSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Coordinate series of one landmark along one axis.
    pub fn series(&self, landmark: usize, axis: usize) -> Vec<f64> {
        self.frames.iter().map(|f| f[landmark][axis]).collect()
    }

    /// Re-expresses the sequence as raw frames whose commissures sit at
    /// (-0.5, 0, 0) and (0.5, 0, 0), so that normalizing them again is exact.
    pub fn to_trajectory(&self, commissure_ids: [u32; 2]) -> TrajectorySequence {
        let frames = self
            .frames
            .iter()
            .zip(&self.retained_indices)
            .map(|(pts, &i)| RawLandmarkFrame {
                frame_index: i,
                timestamp_ms: Some(i as f64 * 1000.0 / self.fps),
                valid: true,
                points: pts.clone(),
                commissures: Some([[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]),
            })
            .collect();
        TrajectorySequence {
            video_id: self.video_id.clone(),
            fps: self.fps,
            label: self.label,
            generator_tag: self.generator_tag.clone(),
            landmark_ids: self.landmark_ids.clone(),
            commissure_ids,
            frames,
            perturb: None,
            malformed_lines: 0,
        }
    }
}

/// Maps every point to `(p - c) / w`, with `c` the commissure midpoint and
/// `w` the commissure distance.
pub fn normalize_points(points: &[Point], left: Point, right: Point) -> Result<Vec<Point>> {
    let center = [(left[0] + right[0]) / 2.0, (left[1] + right[1]) / 2.0, (left[2] + right[2]) / 2.0];
    let width = ((right[0] - left[0]).powi(2) + (right[1] - left[1]).powi(2) + (right[2] - left[2]).powi(2)).sqrt();
    if !(width > MOUTH_WIDTH_EPS) {
        return Err(Error::DegenerateMouthWidth { width });
    }
    Ok(points.iter().map(|p| [(p[0] - center[0]) / width, (p[1] - center[1]) / width, (p[2] - center[2]) / width]).collect())
}

pub fn normalize_frame(frame: &RawLandmarkFrame) -> Result<Vec<Point>> {
    let [left, right] = frame.commissures.ok_or_else(|| Error::InvalidInput(format!("frame {} has no commissures", frame.frame_index)))?;
    normalize_points(&frame.points, left, right)
}

/// Normalizes valid frames, drops everything else, and rejects sequences
/// without a contiguous valid run of `min_valid_run` frames. Frames whose
/// mouth width is degenerate count as invalid.
pub fn filter_sequence(seq: &TrajectorySequence, min_valid_run: usize) -> Result<NormalizedSequence> {
    if min_valid_run < MIN_VALID_RUN {
        return Err(Error::InvalidConfig(format!("min_valid_run {min_valid_run} < {MIN_VALID_RUN}")));
    }
    let mut frames = Vec::new();
    let mut retained = Vec::new();
    let mut longest = 0usize;
    let mut run = 0usize;
    let mut prev_index: Option<u64> = None;
    for frame in &seq.frames {
        let normalized = if frame.valid { normalize_frame(frame).ok() } else { None };
        match normalized {
            Some(pts) => {
                // Runs are contiguous in original frame numbering.
                let contiguous = prev_index.is_some_and(|p| p + 1 == frame.frame_index);
                run = if contiguous { run + 1 } else { 1 };
                longest = longest.max(run);
                prev_index = Some(frame.frame_index);
                frames.push(pts);
                retained.push(frame.frame_index);
            }
            None => {
                run = 0;
                prev_index = None;
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::AllFramesInvalid(seq.video_id.clone()));
    }
    if longest < min_valid_run {
        return Err(Error::SequenceRejected { video_id: seq.video_id.clone(), longest, required: min_valid_run });
    }
    Ok(NormalizedSequence {
        video_id: seq.video_id.clone(),
        fps: seq.fps,
        label: seq.label,
        generator_tag: seq.generator_tag.clone(),
        landmark_ids: seq.landmark_ids.clone(),
        frames,
        retained_indices: retained,
    })
}

fn header_field<'a>(obj: &'a Map<String, Value>, line: usize, field: &'static str) -> Result<&'a Value> {
    obj.get(field).ok_or(Error::MissingRequiredField { line, field })
}

fn as_id(v: &Value) -> Option<u32> {
    v.as_u64().and_then(|x| u32::try_from(x).ok())
}

fn parse_point(v: &Value) -> Option<Point> {
    let arr = v.as_array()?;
    if arr.len() != 3 {
        return None;
    }
    let mut p = [0.0; 3];
    for (dst, src) in p.iter_mut().zip(arr) {
        *dst = src.as_f64().filter(|x| x.is_finite())?;
    }
    Some(p)
}

fn parse_points(v: Option<&Value>, n: usize) -> Option<Vec<Point>> {
    let arr = v?.as_array()?;
    if arr.len() != n {
        return None;
    }
    arr.iter().map(parse_point).collect()
}

fn parse_header(obj: &Map<String, Value>, line: usize) -> Result<TrajectorySequence> {
    let bad = |msg: &str| Error::MalformedHeader(format!("line {line}: {msg}"));
    let video_id = header_field(obj, line, "video_id")?.as_str().ok_or_else(|| bad("video_id must be a string"))?.to_string();
    let fps = header_field(obj, line, "fps")?
        .as_f64()
        .filter(|f| f.is_finite() && *f > 0.0)
        .ok_or_else(|| bad("fps must be a positive number"))?;
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().and_then(Label::from_bit).ok_or_else(|| bad("label must be 0, 1 or null"))?),
    };
    let generator_tag = match obj.get("generator") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_str().ok_or_else(|| bad("generator must be a string or null"))?.to_string()),
    };
    let landmark_ids: Vec<u32> = header_field(obj, line, "landmark_ids")?
        .as_array()
        .and_then(|a| a.iter().map(as_id).collect::<Option<Vec<_>>>())
        .ok_or_else(|| bad("landmark_ids must be an array of ids"))?;
    if landmark_ids.len() != N_LANDMARKS {
        return Err(bad(&format!("expected {N_LANDMARKS} landmark_ids, got {}", landmark_ids.len())));
    }
    if landmark_ids.iter().collect::<HashSet<_>>().len() != N_LANDMARKS {
        return Err(bad("landmark_ids contains duplicates"));
    }
    let commissure_ids = header_field(obj, line, "commissure_ids")?
        .as_array()
        .filter(|a| a.len() == 2)
        .and_then(|a| Some([as_id(&a[0])?, as_id(&a[1])?]))
        .ok_or_else(|| bad("commissure_ids must be two ids"))?;
    Ok(TrajectorySequence {
        video_id,
        fps,
        label,
        generator_tag,
        landmark_ids,
        commissure_ids,
        frames: Vec::new(),
        perturb: obj.get("perturb").cloned(),
        malformed_lines: 0,
    })
}

/// Parses one Landmark JSONL stream. Unparseable lines are skipped and
/// counted in `malformed_lines`; frames whose points are incomplete or
/// non-finite are kept with `valid = false`.
pub fn parse_trajectory<R: BufRead>(reader: R) -> Result<TrajectorySequence> {
    let mut seq: Option<TrajectorySequence> = None;
    let mut commissure_pos: [Option<usize>; 2] = [None, None];
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io("<stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let Some(seq) = seq.as_mut() else {
            let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedHeader(format!("line {lineno}: {e}")))?;
            let obj = value
                .as_object()
                .filter(|o| o.get("type").and_then(Value::as_str) == Some("header"))
                .ok_or_else(|| Error::MalformedHeader(format!("line {lineno}: first record is not a header")))?;
            let header = parse_header(obj, lineno)?;
            for (slot, id) in commissure_pos.iter_mut().zip(header.commissure_ids) {
                *slot = header.landmark_ids.iter().position(|&x| x == id);
            }
            seq = Some(header);
            continue;
        };
        let record = match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(obj)) if obj.get("type").and_then(Value::as_str) == Some("frame") => obj,
            _ => {
                seq.malformed_lines += 1;
                continue;
            }
        };
        let frame_index = record
            .get("i")
            .ok_or(Error::MissingRequiredField { line: lineno, field: "i" })?
            .as_u64()
            .ok_or(Error::MissingRequiredField { line: lineno, field: "i" })?;
        let flagged_valid =
            record.get("valid").and_then(Value::as_bool).ok_or(Error::MissingRequiredField { line: lineno, field: "valid" })?;
        if let Some(prev) = seq.frames.last() {
            if frame_index <= prev.frame_index {
                return Err(Error::NonMonotoneFrameIndex { line: lineno, prev: prev.frame_index, got: frame_index });
            }
        }
        let timestamp_ms = record.get("t_ms").and_then(Value::as_f64);
        let points = parse_points(record.get("pts"), N_LANDMARKS);
        let commissures = match (points.as_ref(), commissure_pos) {
            (Some(p), [Some(l), Some(r)]) => Some([p[l], p[r]]),
            _ => parse_points(record.get("cpts"), 2).map(|c| [c[0], c[1]]),
        };
        let valid = flagged_valid && points.is_some() && commissures.is_some();
        seq.frames.push(RawLandmarkFrame { frame_index, timestamp_ms, valid, points: points.unwrap_or_default(), commissures });
    }
    seq.ok_or_else(|| Error::MalformedHeader("empty stream".into()))
}

pub fn read_trajectory(path: &Path) -> Result<TrajectorySequence> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn point_value(p: &Point) -> Value {
    json!([p[0], p[1], p[2]])
}

pub fn write_trajectory<W: Write>(seq: &TrajectorySequence, mut out: W) -> Result<()> {
    let mut header = json!({
        "type": "header",
        "video_id": seq.video_id,
        "fps": seq.fps,
        "label": seq.label.map(Label::bit),
        "generator": seq.generator_tag,
        "landmark_ids": seq.landmark_ids,
        "commissure_ids": seq.commissure_ids,
    });
    if let Some(p) = &seq.perturb {
        header["perturb"] = p.clone();
    }
    let io = |e| Error::io("<output>", e);
    writeln!(out, "{header}").map_err(io)?;
    let external = seq.commissures_external();
    for f in &seq.frames {
        let mut rec = json!({
            "type": "frame",
            "i": f.frame_index,
            "t_ms": f.timestamp_ms,
            "valid": f.valid,
            "pts": f.points.iter().map(point_value).collect::<Vec<_>>(),
        });
        if external {
            if let Some(c) = &f.commissures {
                rec["cpts"] = json!([point_value(&c[0]), point_value(&c[1])]);
            }
        }
        writeln!(out, "{rec}").map_err(io)?;
    }
    Ok(())
}

/// Writes to `path` through a temporary sibling and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_trajectory(seq: &TrajectorySequence, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trajectory(seq, &mut buf)?;
    write_atomic(path, &buf)
}

/// Sorted `*.jsonl` paths in a directory (or the file itself).
pub fn jsonl_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_dir(path: &Path) -> Result<Vec<TrajectorySequence>> {
    let files = jsonl_files(path)?;
    exec::map(&files, |p| read_trajectory(p)).into_iter().collect()
}

/// Outcome of filtering a batch of sequences.
#[derive(Debug, Default)]
pub struct FilterReport {
    pub accepted: Vec<NormalizedSequence>,
    pub rejected: BTreeMap<String, String>,
    pub off_nominal_fps: Vec<String>,
}

pub fn filter_all(seqs: &[TrajectorySequence], min_valid_run: usize) -> FilterReport {
    let results = exec::map(seqs, |s| filter_sequence(s, min_valid_run));
    let mut report = FilterReport::default();
    for (seq, res) in seqs.iter().zip(results) {
        if !seq.has_nominal_fps() {
            report.off_nominal_fps.push(seq.video_id.clone());
        }
        match res {
            Ok(n) => report.accepted.push(n),
            Err(e) => {
                report.rejected.insert(seq.video_id.clone(), e.to_string());
            }
        }
    }
    report
}
