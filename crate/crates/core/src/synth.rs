//! Deterministic synthetic video+pose dataset.
//!
//! Each clip shows `J` coloured discs on a dark, noisy background. Disc
//! centres are the 2D skeleton, so token-skeleton maps are exact. A joint
//! keeps its colour in every class; the class only decides how the joints
//! move, which means a model has to read motion to classify.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_pose2d, load_pose3d, write_pose_file, JointRecord, LabeledSample, Skeleton2DSequence,
    Skeleton3DSequence, VideoClip,
};
use crate::error::{Error, Result};
use crate::store;

const BACKGROUND_BASE: f32 = 0.05;
const BACKGROUND_NOISE: f32 = 0.05;
const DEPTH_BASE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Static,
    Linear,
    Circular,
    Oscillating,
    Expanding,
    Contracting,
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::Static,
        Motion::Linear,
        Motion::Circular,
        Motion::Oscillating,
        Motion::Expanding,
        Motion::Contracting,
    ];

    pub fn for_class(class: usize) -> Option<Motion> {
        Self::ALL.get(class).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub joints: usize,
    pub seed: u64,
    /// Peak joint displacement from its base position, in pixels.
    pub motion_amplitude: f64,
    pub render_radius: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            clips_per_class: 32,
            frames: 4,
            height: 32,
            width: 32,
            joints: 5,
            seed: 7,
            motion_amplitude: 10.0,
            render_radius: 3.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.clips_per_class == 0 || self.frames == 0 || self.joints == 0 {
            return cfg("synthetic counts must be positive".into());
        }
        if self.height == 0 || self.width == 0 {
            return cfg("synthetic frame size must be positive".into());
        }
        if self.num_classes > Motion::ALL.len() {
            return cfg(format!(
                "at most {} motion classes are available, asked for {}",
                Motion::ALL.len(),
                self.num_classes
            ));
        }
        if !(self.render_radius >= 1.0 && self.render_radius.is_finite()) {
            return cfg("render_radius must be at least 1 pixel".into());
        }
        if !(self.motion_amplitude >= 0.0 && self.motion_amplitude.is_finite()) {
            return cfg("motion_amplitude must be non-negative".into());
        }
        let margin = self.margin();
        let disc = (2.0 * self.render_radius + 1.0).powi(2);
        if 2.0 * margin >= self.height.min(self.width) as f64 - 1.0
            || self.joints as f64 * disc > (self.height * self.width) as f64
        {
            return cfg(format!(
                "{} discs of radius {} moving by {} px do not fit a {}x{} frame",
                self.joints, self.render_radius, self.motion_amplitude, self.height, self.width
            ));
        }
        Ok(())
    }

    fn margin(&self) -> f64 {
        self.motion_amplitude + self.render_radius
    }

    /// The same generator with an unrelated seed, for held-out evaluation.
    pub fn heldout(&self, clips_per_class: usize) -> Self {
        Self {
            clips_per_class,
            seed: mix(self.seed, 0x5eed_0f_4e1d_0u64),
            ..self.clone()
        }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed per-joint colour, shared by all classes. Every colour has at least
/// one channel at full intensity.
pub fn joint_color(j: usize, joints: usize) -> [f32; 3] {
    let hue = j as f32 / joints as f32 * 6.0;
    let sector = hue.floor() as usize % 6;
    let f = hue - hue.floor();
    let (lo, hi) = (0.25f32, 1.0f32);
    let up = lo + (hi - lo) * f;
    let down = hi - (hi - lo) * f;
    match sector {
        0 => [hi, up, lo],
        1 => [down, hi, lo],
        2 => [lo, hi, up],
        3 => [lo, down, hi],
        4 => [up, lo, hi],
        _ => [hi, lo, down],
    }
}

/// Brightest possible background value; any rendered disc pixel exceeds it.
pub fn background_ceiling() -> f32 {
    BACKGROUND_BASE + BACKGROUND_NOISE
}

struct Trajectory {
    /// `[t][j] -> (x, y)` in pixels.
    xy: Vec<Vec<[f64; 2]>>,
    /// `[t][j] -> z` in sensor units.
    z: Vec<Vec<f64>>,
}

fn trajectory(spec: &SyntheticSpec, motion: Motion, rng: &mut ChaCha8Rng) -> Trajectory {
    let (t_n, j_n) = (spec.frames, spec.joints);
    let m = spec.margin();
    let (w, h) = (spec.width as f64, spec.height as f64);
    let bases: Vec<[f64; 2]> = (0..j_n)
        .map(|_| [rng.random_range(m..=w - 1.0 - m), rng.random_range(m..=h - 1.0 - m)])
        .collect();
    let depths: Vec<f64> = (0..j_n).map(|_| DEPTH_BASE + rng.random_range(-0.3..0.3)).collect();
    let amp = spec.motion_amplitude * rng.random_range(0.75..=1.0);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = [angle.cos(), angle.sin()];
    let spin = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let centroid = [
        bases.iter().map(|b| b[0]).sum::<f64>() / j_n as f64,
        bases.iter().map(|b| b[1]).sum::<f64>() / j_n as f64,
    ];
    // progress in [0, 1] and a symmetric sweep in [-1, 1]
    let progress = |t: usize| if t_n > 1 { t as f64 / (t_n - 1) as f64 } else { 0.0 };
    let sweep = |t: usize| 2.0 * progress(t) - 1.0;

    let mut xy = vec![vec![[0.0; 2]; j_n]; t_n];
    let mut z = vec![vec![0.0; j_n]; t_n];
    for t in 0..t_n {
        for j in 0..j_n {
            let b = bases[j];
            let radial = {
                let (dx, dy) = (b[0] - centroid[0], b[1] - centroid[1]);
                let n = (dx * dx + dy * dy).sqrt();
                if n > 1e-9 { [dx / n, dy / n] } else { dir }
            };
            let phase = spin * std::f64::consts::TAU * t as f64 / t_n as f64 + angle;
            let (offset, dz) = match motion {
                Motion::Static => ([0.0, 0.0], 0.0),
                Motion::Linear => {
                    let s = sweep(t);
                    ([amp * s * dir[0], amp * s * dir[1]], 0.5 * s)
                }
                Motion::Circular => ([amp * phase.cos(), amp * phase.sin()], 0.3 * phase.sin()),
                Motion::Oscillating => {
                    let s = if t % 2 == 0 { 1.0 } else { -1.0 };
                    ([amp * s * dir[0], amp * s * dir[1]], 0.3 * s)
                }
                Motion::Expanding => {
                    let s = amp * sweep(t);
                    ([s * radial[0], s * radial[1]], -0.4 * progress(t))
                }
                Motion::Contracting => {
                    let s = -amp * sweep(t);
                    ([s * radial[0], s * radial[1]], 0.4 * progress(t))
                }
            };
            xy[t][j] = [b[0] + offset[0], b[1] + offset[1]];
            z[t][j] = depths[j] + dz;
        }
    }
    Trajectory { xy, z }
}

fn render(spec: &SyntheticSpec, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (t_n, h_n, w_n) = (spec.frames, spec.height, spec.width);
    let mut frames: Vec<f32> = (0..t_n * h_n * w_n * 3)
        .map(|_| BACKGROUND_BASE + rng.random_range(0.0..BACKGROUND_NOISE))
        .collect();
    let r = spec.render_radius;
    let r2 = r * r;
    for t in 0..t_n {
        for (j, &[x, y]) in traj.xy[t].iter().enumerate() {
            let color = joint_color(j, spec.joints);
            let h_lo = (y - r).floor().max(0.0) as usize;
            let h_hi = ((y + r).ceil() as usize).min(h_n - 1);
            let w_lo = (x - r).floor().max(0.0) as usize;
            let w_hi = ((x + r).ceil() as usize).min(w_n - 1);
            for h in h_lo..=h_hi {
                for w in w_lo..=w_hi {
                    let (dy, dx) = (h as f64 - y, w as f64 - x);
                    if dx * dx + dy * dy <= r2 {
                        let base = ((t * h_n + h) * w_n + w) * 3;
                        frames[base..base + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    }
    frames
}

fn make_sample(spec: &SyntheticSpec, class: usize, index: usize) -> Result<LabeledSample> {
    let motion = Motion::for_class(class).expect("class count validated");
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, (class * spec.clips_per_class + index) as u64));
    let traj = trajectory(spec, motion, &mut rng);
    let frames = render(spec, &traj, &mut rng);
    let id = format!("c{class}_{index:04}");
    let clip = VideoClip::new(id, frames, (spec.frames, spec.height, spec.width), class, 30.0)?;

    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut e2 = Vec::with_capacity(spec.frames * spec.joints);
    let mut e3 = Vec::with_capacity(spec.frames * spec.joints);
    for t in 0..spec.frames {
        for j in 0..spec.joints {
            let [x, y] = traj.xy[t][j];
            e2.push(JointRecord { t, j, pos: [x, y] });
            e3.push(JointRecord {
                t,
                j,
                pos: [2.0 * x / w - 1.0, 2.0 * y / h - 1.0, traj.z[t][j]],
            });
        }
    }
    let pose2d = Skeleton2DSequence::new(spec.frames, spec.joints, e2)?;
    let pose3d = Skeleton3DSequence::new(spec.frames, spec.joints, e3)?;
    LabeledSample::new(clip, Some(pose2d), Some(pose3d))
}

/// Generates `num_classes * clips_per_class` samples, class-major. Output is a
/// pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    (0..spec.num_classes * spec.clips_per_class)
        .into_par_iter()
        .map(|i| make_sample(spec, i / spec.clips_per_class, i % spec.clips_per_class))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    label: usize,
    split: Split,
    frames: String,
    pose2d: Option<String>,
    pose3d: Option<String>,
    fps: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub num_classes: usize,
    pub joints: usize,
    pub spec: Option<SyntheticSpec>,
}

pub const DATASET_FORMAT_TAG: &str = "pivit-dataset/1";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: Vec<LabeledSample>,
    pub heldout: Vec<LabeledSample>,
}

impl Dataset {
    pub fn synthetic(spec: &SyntheticSpec, heldout_per_class: usize) -> Result<Self> {
        let train = generate_synthetic(spec)?;
        let heldout = if heldout_per_class > 0 {
            generate_synthetic(&spec.heldout(heldout_per_class))?
        } else {
            Vec::new()
        };
        Ok(Self {
            meta: DatasetMeta {
                format: DATASET_FORMAT_TAG.into(),
                num_classes: spec.num_classes,
                joints: spec.joints,
                spec: Some(spec.clone()),
            },
            train,
            heldout,
        })
    }

    pub fn split(&self, split: Split) -> &[LabeledSample] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    /// Writes `dataset.json`, `index.jsonl`, one safetensors file of frames
    /// per sample, and pose files.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["samples", "poses"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
        let meta_path = dir.join("dataset.json");
        fs::write(&meta_path, serde_json::to_string_pretty(&self.meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;

        let mut index = String::new();
        for (split, samples) in [(Split::Train, &self.train), (Split::Heldout, &self.heldout)] {
            for s in samples {
                let id = &s.clip.id;
                let prefix = match split {
                    Split::Train => "train",
                    Split::Heldout => "heldout",
                };
                let frames_rel = format!("samples/{prefix}_{id}.safetensors");
                let (t, h, w) = s.clip.dims();
                let frames = Tensor::from_slice(s.clip.data(), (t, h, w, 3), &Device::Cpu)?;
                let map = [("frames".to_string(), frames)].into_iter().collect();
                store::save_tensors(&dir.join(&frames_rel), &map, &serde_json::json!({"id": id}))?;
                let pose2d = match &s.pose2d {
                    Some(p) => {
                        let rel = format!("poses/{prefix}_{id}.2d.jsonl");
                        write_pose_file(&dir.join(&rel), p)?;
                        Some(rel)
                    }
                    None => None,
                };
                let pose3d = match &s.pose3d {
                    Some(p) => {
                        let rel = format!("poses/{prefix}_{id}.3d.jsonl");
                        write_pose_file(&dir.join(&rel), p)?;
                        Some(rel)
                    }
                    None => None,
                };
                let entry = IndexEntry {
                    id: id.clone(),
                    label: s.clip.label,
                    split,
                    frames: frames_rel,
                    pose2d,
                    pose3d,
                    fps: s.clip.fps,
                };
                index.push_str(&serde_json::to_string(&entry)?);
                index.push('\n');
            }
        }
        let index_path = dir.join("index.jsonl");
        fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))
    }

    /// Reads a dataset directory. With `with_poses = false` pose files are
    /// neither required nor opened.
    pub fn read(dir: &Path, with_poses: bool) -> Result<Self> {
        let meta_path = dir.join("dataset.json");
        let meta: DatasetMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
        )
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
        if meta.format != DATASET_FORMAT_TAG {
            return Err(Error::format(&meta_path, format!("unknown format {}", meta.format)));
        }
        let index_path = dir.join("index.jsonl");
        let index = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut train = Vec::new();
        let mut heldout = Vec::new();
        for (i, line) in index.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: IndexEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: index_path.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let frames_path: PathBuf = dir.join(&entry.frames);
            let (tensors, _): (_, serde_json::Value) = store::load_tensors(&frames_path)?;
            let frames = tensors
                .get("frames")
                .ok_or_else(|| Error::format(&frames_path, "missing `frames` tensor"))?;
            let (t, h, w, _) = frames.dims4()?;
            let data = frames.flatten_all()?.to_vec1::<f32>()?;
            let clip = VideoClip::new(entry.id.clone(), data, (t, h, w), entry.label, entry.fps)?;
            clip.check_label(meta.num_classes)?;
            let (pose2d, pose3d) = if with_poses {
                (
                    entry.pose2d.as_ref().map(|p| load_pose2d(&dir.join(p))).transpose()?,
                    entry.pose3d.as_ref().map(|p| load_pose3d(&dir.join(p))).transpose()?,
                )
            } else {
                (None, None)
            };
            let sample = LabeledSample::new(clip, pose2d, pose3d)?;
            match entry.split {
                Split::Train => train.push(sample),
                Split::Heldout => heldout.push(sample),
            }
        }
        Ok(Self { meta, train, heldout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            clips_per_class: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SyntheticSpec { seed: 7, ..small() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            assert_eq!(x.pose2d, y.pose2d);
            assert_eq!(x.pose3d, y.pose3d);
        }
        let c = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a[0].clip, c[0].clip);
    }

    #[test]
    fn counts_and_labels() {
        let spec = SyntheticSpec {
            num_classes: 4,
            clips_per_class: 8,
            ..Default::default()
        };
        let s = generate_synthetic(&spec).unwrap();
        assert_eq!(s.len(), 32);
        for class in 0..4 {
            assert_eq!(s.iter().filter(|x| x.clip.label == class).count(), 8);
        }
    }

    #[test]
    fn every_joint_centre_is_lit_and_in_frame() {
        let spec = SyntheticSpec {
            num_classes: 6,
            clips_per_class: 10,
            ..Default::default()
        };
        for s in generate_synthetic(&spec).unwrap() {
            let pose = s.pose2d.as_ref().unwrap();
            assert_eq!(pose.entries().len(), spec.frames * spec.joints);
            for e in pose.entries() {
                assert!(e.x() >= 0.0 && e.x() < spec.width as f64);
                assert!(e.y() >= 0.0 && e.y() < spec.height as f64);
                let (h, w) = (e.y().round() as usize, e.x().round() as usize);
                let peak = (0..3).map(|c| s.clip.pixel(e.t, h, w, c)).fold(0f32, f32::max);
                assert!(peak > background_ceiling(), "{} t={} j={}", s.clip.id, e.t, e.j);
            }
        }
    }

    #[test]
    fn rejects_crowded_frames() {
        let spec = SyntheticSpec {
            height: 8,
            width: 8,
            motion_amplitude: 3.0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            joints: 50,
            render_radius: 2.0,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            num_classes: 7,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn static_class_does_not_move() {
        let spec = SyntheticSpec {
            num_classes: 2,
            ..small()
        };
        let s = &generate_synthetic(&spec).unwrap()[0];
        assert_eq!(s.clip.label, 0);
        let pose = s.pose2d.as_ref().unwrap();
        for j in 0..spec.joints {
            let first = pose.get(0, j).unwrap().pos;
            for t in 1..spec.frames {
                assert_eq!(pose.get(t, j).unwrap().pos, first);
            }
        }
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(&small(), 1).unwrap();
        ds.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path(), true).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.heldout.len(), 4);
        assert_eq!(back.train[5].clip, ds.train[5].clip);
        assert_eq!(back.train[5].pose2d, ds.train[5].pose2d);
        let bare = Dataset::read(dir.path(), false).unwrap();
        assert!(bare.train.iter().all(|s| s.pose2d.is_none() && s.pose3d.is_none()));
    }
}
