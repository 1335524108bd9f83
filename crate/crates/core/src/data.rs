//! Clip and skeleton containers plus the line-delimited JSON pose format.
//!
//! Frame and joint indices are 1-based in pose files and 0-based everywhere
//! else; the conversion happens once, in [`load_pose_file`].
//!
//! Only single-person sequences are modelled. Callers merging several people
//! upstream should union their entries and give each person a disjoint joint
//! index range, since a `(t, j)` pair may occur at most once.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tag written by `--version`; bump when the pose schema changes.
pub const POSE_FORMAT_TAG: &str = "pivit-pose/1";

/// An RGB clip stored as a dense `T x H x W x 3` array of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    frames: Vec<f32>,
    num_frames: usize,
    height: usize,
    width: usize,
    pub label: usize,
    pub fps: f32,
}

impl VideoClip {
    pub const CHANNELS: usize = 3;

    pub fn new(
        id: impl Into<String>,
        frames: Vec<f32>,
        (num_frames, height, width): (usize, usize, usize),
        label: usize,
        fps: f32,
    ) -> Result<Self> {
        let id = id.into();
        if num_frames == 0 || height == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "clip {id}: empty dimensions {num_frames}x{height}x{width}"
            )));
        }
        let expected = num_frames * height * width * Self::CHANNELS;
        if frames.len() != expected {
            return Err(Error::Validation(format!(
                "clip {id}: expected {expected} values, got {}",
                frames.len()
            )));
        }
        if let Some(v) = frames.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::Validation(format!(
                "clip {id}: pixel value {v} outside [0, 1]"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Validation(format!("clip {id}: fps must be positive")));
        }
        Ok(Self {
            id,
            frames,
            num_frames,
            height,
            width,
            label,
            fps,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.num_frames, self.height, self.width)
    }

    /// Raw frame data in `(t, h, w, c)` row-major order.
    pub fn data(&self) -> &[f32] {
        &self.frames
    }

    #[inline]
    pub fn pixel(&self, t: usize, h: usize, w: usize, c: usize) -> f32 {
        self.frames[((t * self.height + h) * self.width + w) * Self::CHANNELS + c]
    }

    pub fn check_label(&self, num_classes: usize) -> Result<()> {
        if self.label >= num_classes {
            return Err(Error::Validation(format!(
                "clip {}: label {} not below class count {num_classes}",
                self.id, self.label
            )));
        }
        Ok(())
    }
}

/// Output frame `i` reads input frame `floor(i * T / target)`.
pub fn resample_indices(num_frames: usize, target: usize) -> Vec<usize> {
    (0..target).map(|i| i * num_frames / target).collect()
}

pub fn resample_clip(clip: &VideoClip, target: usize) -> Result<VideoClip> {
    if target == 0 {
        return Err(Error::Config("target frame count must be at least 1".into()));
    }
    let frame_len = clip.height * clip.width * VideoClip::CHANNELS;
    let mut frames = Vec::with_capacity(target * frame_len);
    for src in resample_indices(clip.num_frames, target) {
        frames.extend_from_slice(&clip.frames[src * frame_len..(src + 1) * frame_len]);
    }
    Ok(VideoClip {
        frames,
        num_frames: target,
        ..clip.clone()
    })
}

/// One joint observation. `t` and `j` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointRecord<const D: usize> {
    pub t: usize,
    pub j: usize,
    pub pos: [f64; D],
}

impl<const D: usize> JointRecord<D> {
    pub fn x(&self) -> f64 {
        self.pos[0]
    }

    pub fn y(&self) -> f64 {
        self.pos[1]
    }
}

impl JointRecord<3> {
    pub fn z(&self) -> f64 {
        self.pos[2]
    }
}

/// A set of joint records over `num_frames x num_joints` slots, sorted by `(t, j)`
/// with at most one record per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence<const D: usize> {
    num_frames: usize,
    num_joints: usize,
    entries: Vec<JointRecord<D>>,
}

pub type Skeleton2DSequence = SkeletonSequence<2>;
pub type Skeleton3DSequence = SkeletonSequence<3>;

impl<const D: usize> SkeletonSequence<D> {
    pub fn new(num_frames: usize, num_joints: usize, mut entries: Vec<JointRecord<D>>) -> Result<Self> {
        if num_frames == 0 || num_joints == 0 {
            return Err(Error::Validation(format!(
                "skeleton needs T >= 1 and J >= 1, got T={num_frames} J={num_joints}"
            )));
        }
        for e in &entries {
            if e.t >= num_frames || e.j >= num_joints {
                return Err(Error::Validation(format!(
                    "joint record (t={}, j={}) outside T={num_frames} J={num_joints}",
                    e.t + 1,
                    e.j + 1
                )));
            }
            if e.pos.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "joint record (t={}, j={}) has non-finite coordinates",
                    e.t + 1,
                    e.j + 1
                )));
            }
        }
        entries.sort_by_key(|e| (e.t, e.j));
        if let Some(w) = entries.windows(2).find(|w| (w[0].t, w[0].j) == (w[1].t, w[1].j)) {
            return Err(Error::Validation(format!(
                "duplicate joint record (t={}, j={})",
                w[0].t + 1,
                w[0].j + 1
            )));
        }
        Ok(Self {
            num_frames,
            num_joints,
            entries,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_joints(&self) -> usize {
        self.num_joints
    }

    pub fn entries(&self) -> &[JointRecord<D>] {
        &self.entries
    }

    pub fn get(&self, t: usize, j: usize) -> Option<&JointRecord<D>> {
        self.entries
            .binary_search_by_key(&(t, j), |e| (e.t, e.j))
            .ok()
            .map(|i| &self.entries[i])
    }

    /// Re-indexes the timeline so output frame `i` holds the records of input
    /// frame `indices[i]`. Use with [`resample_indices`] to follow a clip.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_frames) {
            return Err(Error::Validation(format!(
                "frame index {bad} outside T={}",
                self.num_frames
            )));
        }
        let mut entries = Vec::new();
        for (new_t, &old_t) in indices.iter().enumerate() {
            entries.extend(
                self.entries
                    .iter()
                    .filter(|e| e.t == old_t)
                    .map(|e| JointRecord { t: new_t, ..*e }),
            );
        }
        Self::new(indices.len(), self.num_joints, entries)
    }

    pub fn resample(&self, target: usize) -> Result<Self> {
        self.select_frames(&resample_indices(self.num_frames, target))
    }

    /// Replaces all coordinates through `f`, keeping indices.
    pub fn map_positions(&self, mut f: impl FnMut(&JointRecord<D>) -> [f64; D]) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| JointRecord { pos: f(e), ..*e })
            .collect();
        Self::new(self.num_frames, self.num_joints, entries)
    }
}

/// A clip with whatever poses are available for it.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub clip: VideoClip,
    pub pose2d: Option<Skeleton2DSequence>,
    pub pose3d: Option<Skeleton3DSequence>,
}

impl LabeledSample {
    pub fn new(
        clip: VideoClip,
        pose2d: Option<Skeleton2DSequence>,
        pose3d: Option<Skeleton3DSequence>,
    ) -> Result<Self> {
        let t = clip.num_frames();
        let mismatch = pose2d.as_ref().map(|p| p.num_frames()).filter(|&pt| pt != t).or(pose3d
            .as_ref()
            .map(|p| p.num_frames())
            .filter(|&pt| pt != t));
        if let Some(pt) = mismatch {
            return Err(Error::Validation(format!(
                "sample {}: pose has {pt} frames, clip has {t}",
                clip.id
            )));
        }
        Ok(Self { clip, pose2d, pose3d })
    }

    /// Resamples the clip and both pose streams with one shared index set.
    pub fn resample(&self, target: usize) -> Result<Self> {
        let clip = resample_clip(&self.clip, target)?;
        let idx = resample_indices(self.clip.num_frames(), target);
        Ok(Self {
            clip,
            pose2d: self.pose2d.as_ref().map(|p| p.select_frames(&idx)).transpose()?,
            pose3d: self.pose3d.as_ref().map(|p| p.select_frames(&idx)).transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub enum PoseSequence {
    TwoD(Skeleton2DSequence),
    ThreeD(Skeleton3DSequence),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseHeader {
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "J")]
    joints: usize,
    dims: u8,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseLine {
    t: usize,
    j: usize,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<f64>,
}

/// Reads a pose file; `dims` must match the header's declared dimensionality.
pub fn load_pose_file(path: &Path, dims: u8) -> Result<PoseSequence> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let header_line = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: PoseHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.dims != 2 && header.dims != 3 {
        return Err(parse_err(1, format!("dims must be 2 or 3, got {}", header.dims)));
    }
    if header.dims != dims {
        return Err(Error::Validation(format!(
            "{}: expected {dims}D poses, file declares {}D",
            path.display(),
            header.dims
        )));
    }

    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match (dims, rec.z) {
            (2, Some(_)) => return Err(parse_err(lineno, "unexpected z in 2D file".into())),
            (3, None) => return Err(parse_err(lineno, "missing z in 3D file".into())),
            _ => {}
        }
        if rec.t == 0 || rec.t > header.frames || rec.j == 0 || rec.j > header.joints {
            return Err(Error::Validation(format!(
                "{}: line {lineno}: index (t={}, j={}) outside T={} J={}",
                path.display(),
                rec.t,
                rec.j,
                header.frames,
                header.joints
            )));
        }
        records.push(rec);
    }

    let seq = if dims == 2 {
        PoseSequence::TwoD(SkeletonSequence::new(
            header.frames,
            header.joints,
            records
                .iter()
                .map(|r| JointRecord { t: r.t - 1, j: r.j - 1, pos: [r.x, r.y] })
                .collect(),
        )?)
    } else {
        PoseSequence::ThreeD(SkeletonSequence::new(
            header.frames,
            header.joints,
            records
                .iter()
                .map(|r| JointRecord {
                    t: r.t - 1,
                    j: r.j - 1,
                    pos: [r.x, r.y, r.z.unwrap_or_default()],
                })
                .collect(),
        )?)
    };
    Ok(seq)
}

pub fn load_pose2d(path: &Path) -> Result<Skeleton2DSequence> {
    match load_pose_file(path, 2)? {
        PoseSequence::TwoD(s) => Ok(s),
        PoseSequence::ThreeD(_) => unreachable!("dims checked against header"),
    }
}

pub fn load_pose3d(path: &Path) -> Result<Skeleton3DSequence> {
    match load_pose_file(path, 3)? {
        PoseSequence::ThreeD(s) => Ok(s),
        PoseSequence::TwoD(_) => unreachable!("dims checked against header"),
    }
}

pub fn write_pose_file<const D: usize>(path: &Path, seq: &SkeletonSequence<D>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = PoseHeader {
        frames: seq.num_frames,
        joints: seq.num_joints,
        dims: D as u8,
    };
    let mut write = |s: String| writeln!(out, "{s}").map_err(|e| Error::io(path, e));
    write(serde_json::to_string(&header)?)?;
    for e in &seq.entries {
        let line = PoseLine {
            t: e.t + 1,
            j: e.j + 1,
            x: e.pos[0],
            y: e.pos[1],
            z: (D == 3).then(|| e.pos[D - 1]),
        };
        write(serde_json::to_string(&line)?)?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
