//! Pose-track curation: face-count filtering, pose-variation scoring,
//! threshold filtering, pair sampling and manifest assembly.
//!
//! Input is JSONL, one track per line:
//!
//! ```json
//! {"video_id": "v1", "width": 832, "height": 480,
//!  "frames": [{"i": 0, "faces": 1, "bbox": [x1, y1, x2, y2], "euler": [pitch, yaw, roll]}, ...]}
//! ```
//!
//! `bbox` and `euler` are present exactly when `faces >= 1` and describe the
//! largest face.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::pose::{enlarge_bbox, BBox, EulerAngles, FrameDims};
use crate::rng::{stream, string_key, Domain};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 120.0;
pub const CROP_ENLARGEMENT: f64 = 1.5;

/// One JSONL line as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackLine {
    pub video_id: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameLine>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameLine {
    pub i: u64,
    pub faces: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub euler: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceObservation {
    pub bbox: BBox,
    pub euler: EulerAngles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub face_count: u32,
    pub face: Option<FaceObservation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrack {
    pub video_id: String,
    pub frame_dims: FrameDims,
    pub frames: Vec<FrameRecord>,
}

impl PoseTrack {
    fn from_line(line: TrackLine) -> std::result::Result<Self, String> {
        if line.video_id.is_empty() {
            return Err("video_id: must not be empty".into());
        }
        if line.width == 0 || line.height == 0 {
            return Err(format!("width/height: frame must be non-empty, got {}x{}", line.width, line.height));
        }
        let mut frames = Vec::with_capacity(line.frames.len());
        let mut prev: Option<u64> = None;
        for (k, f) in line.frames.into_iter().enumerate() {
            if prev.is_some_and(|p| f.i <= p) {
                return Err(format!("frames[{k}].i: frame_index {} does not increase (previous {})", f.i, prev.unwrap()));
            }
            prev = Some(f.i);
            let face = match (f.faces, f.bbox, f.euler) {
                (0, None, None) => None,
                (0, _, _) => return Err(format!("frames[{k}]: bbox/euler present on a frame without faces")),
                (_, Some(b), Some(e)) => {
                    let bbox = BBox::new(b[0], b[1], b[2], b[3]).map_err(|err| format!("frames[{k}].bbox: {err}"))?;
                    let euler = EulerAngles::new(e[0], e[1], e[2]).map_err(|err| format!("frames[{k}].euler: {err}"))?;
                    Some(FaceObservation { bbox, euler })
                }
                (_, None, _) => return Err(format!("frames[{k}].bbox: missing on a frame with faces")),
                (_, _, None) => return Err(format!("frames[{k}].euler: missing on a frame with faces")),
            };
            frames.push(FrameRecord { frame_index: f.i, face_count: f.faces, face });
        }
        Ok(Self { video_id: line.video_id, frame_dims: FrameDims { width: line.width, height: line.height }, frames })
    }

    pub fn faced_frames(&self) -> impl Iterator<Item = (&FrameRecord, &FaceObservation)> {
        self.frames.iter().filter_map(|f| f.face.as_ref().map(|o| (f, o)))
    }
}

/// Parse JSONL tracks. Blank lines are skipped; the first malformed line
/// aborts with its 1-based line number.
pub fn parse_tracks<R: BufRead>(input: R) -> Result<Vec<PoseTrack>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TrackLine =
            serde_json::from_str(&line).map_err(|e| Error::Schema { line: line_no, message: e.to_string() })?;
        let track = PoseTrack::from_line(raw).map_err(|message| Error::Schema { line: line_no, message })?;
        out.push(track);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Ok,
    NoFace,
    MultiFace,
    LowVariation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurationDecision {
    pub video_id: String,
    pub accepted: bool,
    pub reason: Reason,
    /// Absent when the track was rejected before scoring.
    pub var_score: Option<f64>,
}

impl CurationDecision {
    fn reject(t: &PoseTrack, reason: Reason, var_score: Option<f64>) -> Self {
        Self { video_id: t.video_id.clone(), accepted: false, reason, var_score }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationPolicy {
    /// Tracks with `Var > threshold` qualify.
    pub threshold: f64,
    /// Any frame with more faces than this rejects the track.
    pub max_faces: u32,
    /// Odd window for median smoothing of the angle series; `None` uses raw angles.
    pub median_window: Option<usize>,
    /// Probability of drawing the per-axis extreme frames as the pair.
    pub extrema_bias: f64,
}

impl Default for CurationPolicy {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, max_faces: 1, median_window: None, extrema_bias: 0.5 }
    }
}

impl CurationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0 && self.threshold.is_finite()) {
            return Err(Error::InvalidArgument(format!("threshold must be finite and non-negative, got {}", self.threshold)));
        }
        if self.max_faces == 0 {
            return Err(Error::InvalidArgument("max_faces must be at least 1".into()));
        }
        if let Some(w) = self.median_window {
            if w == 0 || w % 2 == 0 {
                return Err(Error::InvalidArgument(format!("median_window must be odd, got {w}")));
            }
        }
        if !(0.0..=1.0).contains(&self.extrema_bias) {
            return Err(Error::InvalidArgument(format!("extrema_bias must lie in [0, 1], got {}", self.extrema_bias)));
        }
        Ok(())
    }
}

/// `Some(rejection)` for multi-face or face-less tracks, `None` to continue.
pub fn face_filter(t: &PoseTrack, max_faces: u32) -> Option<CurationDecision> {
    if t.frames.iter().any(|f| f.face_count > max_faces) {
        return Some(CurationDecision::reject(t, Reason::MultiFace, None));
    }
    if t.frames.iter().all(|f| f.face_count == 0) {
        return Some(CurationDecision::reject(t, Reason::NoFace, None));
    }
    None
}

fn median_smooth(series: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            let mut w = series[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            let m = w.len() / 2;
            if w.len() % 2 == 1 { w[m] } else { (w[m - 1] + w[m]) / 2.0 }
        })
        .collect()
}

/// Sum over pitch, yaw and roll of `max - min` across frames with a face.
pub fn pose_variation(t: &PoseTrack, median_window: Option<usize>) -> Result<f64> {
    let mut axes: [Vec<f64>; 3] = Default::default();
    for (_, face) in t.faced_frames() {
        for (series, angle) in axes.iter_mut().zip(face.euler.as_array()) {
            series.push(angle);
        }
    }
    if axes[0].is_empty() {
        return Err(Error::InvalidArgument(format!("track '{}' has no frames with a face", t.video_id)));
    }
    Ok(axes
        .iter()
        .map(|series| {
            let smoothed;
            let values = match median_window {
                Some(w) if w > 1 => {
                    smoothed = median_smooth(series, w);
                    &smoothed
                }
                _ => series,
            };
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        })
        .sum())
}

/// Strict: a score equal to the threshold is rejected.
pub fn threshold_filter(var: f64, threshold: f64) -> bool {
    var > threshold
}

pub fn decide(t: &PoseTrack, policy: &CurationPolicy) -> Result<CurationDecision> {
    if let Some(rejected) = face_filter(t, policy.max_faces) {
        return Ok(rejected);
    }
    let var = pose_variation(t, policy.median_window)?;
    if threshold_filter(var, policy.threshold) {
        Ok(CurationDecision { video_id: t.video_id.clone(), accepted: true, reason: Reason::Ok, var_score: Some(var) })
    } else {
        Ok(CurationDecision::reject(t, Reason::LowVariation, Some(var)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairFrame {
    pub frame_index: u64,
    pub crop: BBox,
    pub euler: EulerAngles,
}

/// Draw two distinct faced frames. With probability `extrema_bias` the pair
/// is the argmin/argmax frame of a random axis; otherwise it is uniform over
/// unordered pairs. Frames come back in track order.
pub fn sample_pair<R: Rng>(t: &PoseTrack, extrema_bias: f64, rng: &mut R) -> Result<[PairFrame; 2]> {
    let faced: Vec<(&FrameRecord, &FaceObservation)> = t.faced_frames().collect();
    if faced.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "track '{}' has {} faced frame(s); a pair needs two",
            t.video_id,
            faced.len()
        )));
    }
    let mut chosen = None;
    if faced.len() > 2 && rng.random_bool(extrema_bias) {
        let axis = rng.random_range(0..3);
        let angle = |k: usize| faced[k].1.euler.as_array()[axis];
        let (mut lo, mut hi) = (0, 0);
        for k in 1..faced.len() {
            if angle(k) < angle(lo) {
                lo = k;
            }
            if angle(k) > angle(hi) {
                hi = k;
            }
        }
        if lo != hi {
            chosen = Some((lo.min(hi), lo.max(hi)));
        }
    }
    let (a, b) = match chosen {
        Some(p) => p,
        None if faced.len() == 2 => (0, 1),
        None => {
            let mut v = sample(rng, faced.len(), 2).into_vec();
            v.sort_unstable();
            (v[0], v[1])
        }
    };
    let make = |k: usize| -> Result<PairFrame> {
        let (frame, face) = faced[k];
        let crop = enlarge_bbox(&face.bbox, CROP_ENLARGEMENT, t.frame_dims)?.round_outward();
        Ok(PairFrame { frame_index: frame.frame_index, crop, euler: face.euler })
    };
    Ok([make(a)?, make(b)?])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub prompt: String,
    pub pair: [PairFrame; 2],
    pub var_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub accepted: usize,
    pub no_face: usize,
    pub multi_face: usize,
    pub low_variation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub format_version: u32,
    pub threshold: f64,
    pub entries: Vec<ManifestEntry>,
    pub summary: Summary,
}

impl Manifest {
    pub fn write_json<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }
}

pub fn build_manifest(
    decisions: &[CurationDecision],
    tracks: &[PoseTrack],
    prompts: &BTreeMap<String, String>,
    policy: &CurationPolicy,
    seed: u64,
) -> Result<Manifest> {
    let mut seen = HashSet::new();
    for t in tracks {
        if !seen.insert(t.video_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate video_id '{}'", t.video_id)));
        }
    }
    let by_id: BTreeMap<&str, &PoseTrack> = tracks.iter().map(|t| (t.video_id.as_str(), t)).collect();

    let mut summary = Summary::default();
    let mut entries = Vec::new();
    for d in decisions {
        match d.reason {
            Reason::Ok => summary.accepted += 1,
            Reason::NoFace => summary.no_face += 1,
            Reason::MultiFace => summary.multi_face += 1,
            Reason::LowVariation => summary.low_variation += 1,
        }
        if !d.accepted {
            continue;
        }
        let track = by_id
            .get(d.video_id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("decision for unknown video_id '{}'", d.video_id)))?;
        let mut rng = stream(seed, Domain::Curation, string_key(&d.video_id));
        let pair = sample_pair(track, policy.extrema_bias, &mut rng)?;
        let prompt = prompts.get(&d.video_id).cloned().unwrap_or_else(|| {
            warn!("no prompt for video '{}'; leaving it empty", d.video_id);
            String::new()
        });
        entries.push(ManifestEntry {
            video_id: d.video_id.clone(),
            prompt,
            pair,
            var_score: d.var_score.expect("accepted tracks are scored"),
        });
    }
    entries.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    Ok(Manifest { format_version: MANIFEST_VERSION, threshold: policy.threshold, entries, summary })
}

/// Decide every track, then assemble the manifest.
pub fn curate(
    tracks: &[PoseTrack],
    prompts: &BTreeMap<String, String>,
    policy: &CurationPolicy,
    seed: u64,
) -> Result<(Vec<CurationDecision>, Manifest)> {
    policy.validate()?;
    let decisions = tracks.iter().map(|t| decide(t, policy)).collect::<Result<Vec<_>>>()?;
    let manifest = build_manifest(&decisions, tracks, prompts, policy, seed)?;
    Ok((decisions, manifest))
}
