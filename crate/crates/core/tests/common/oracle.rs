//! Brute-force reference computations, written independently of the library
//! code paths they check.

use pivit_core::backbone::BackboneConfig;
use pivit_core::data::{JointRecord, Skeleton2DSequence};
use rand::Rng;

/// Geometry of one randomized map instance.
#[derive(Debug, Clone, Copy)]
pub struct MapCase {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub tau: usize,
    pub joints: usize,
}

impl MapCase {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            frames: rng.random_range(1..=6),
            height: rng.random_range(1..=48),
            width: rng.random_range(1..=48),
            patch: if rng.random_bool(0.5) { 4 } else { 8 },
            tau: rng.random_range(1..=2),
            joints: rng.random_range(1..=8),
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            frames: self.frames,
            height: self.height,
            width: self.width,
            tau: self.tau,
            patch: self.patch,
            ..BackboneConfig::default()
        }
    }
}

/// Each `(t, j)` slot filled with probability `fill`; coordinates may land a
/// few pixels outside the frame.
pub fn random_pose(rng: &mut impl Rng, case: &MapCase, fill: f64) -> Skeleton2DSequence {
    let mut entries = Vec::new();
    for t in 0..case.frames {
        for j in 0..case.joints {
            if rng.random_bool(fill) {
                let x = rng.random_range(-4.0..case.width as f64 + 4.0);
                let y = rng.random_range(-4.0..case.height as f64 + 4.0);
                entries.push(JointRecord { t, j, pos: [x, y] });
            }
        }
    }
    Skeleton2DSequence::new(case.frames, case.joints, entries).unwrap()
}

/// For every `(token, joint)` pair, whether any pose entry of that joint
/// falls inside the token's `tau x p x p` window. Row-major `(t', s, j)`.
pub fn token_map(pose: &Skeleton2DSequence, case: &MapCase) -> Vec<bool> {
    let rows = case.height.div_ceil(case.patch);
    let cols = case.width.div_ceil(case.patch);
    let t_v = case.frames.div_ceil(case.tau);
    let mut out = Vec::with_capacity(t_v * rows * cols * case.joints);
    for tv in 0..t_v {
        let t_range = tv * case.tau..((tv + 1) * case.tau).min(case.frames);
        for r in 0..rows {
            let h_range = r * case.patch..((r + 1) * case.patch).min(case.height);
            for c in 0..cols {
                let w_range = c * case.patch..((c + 1) * case.patch).min(case.width);
                for j in 0..case.joints {
                    let hit = pose.entries().iter().any(|e| {
                        let (px, py) = (e.x().floor(), e.y().floor());
                        e.j == j
                            && t_range.contains(&e.t)
                            && px >= 0.0
                            && py >= 0.0
                            && h_range.contains(&(py as usize))
                            && w_range.contains(&(px as usize))
                    });
                    out.push(hit);
                }
            }
        }
    }
    out
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Confusion counts, top-1 and mean recall from a second, independent pass.
pub struct Recount {
    pub confusion: Vec<Vec<u64>>,
    pub top1: f64,
    pub mca: f64,
}

pub fn recount(labels: &[usize], preds: &[usize], classes: usize) -> Recount {
    let mut confusion = vec![vec![0u64; classes]; classes];
    for a in 0..classes {
        for p in 0..classes {
            confusion[a][p] = labels.iter().zip(preds).filter(|(l, q)| **l == a && **q == p).count() as u64;
        }
    }
    let hits = labels.iter().zip(preds).filter(|(l, p)| l == p).count();
    let mut recalls = Vec::new();
    for c in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if !members.is_empty() {
            let right = members.iter().filter(|&&i| preds[i] == c).count();
            recalls.push(right as f64 / members.len() as f64);
        }
    }
    Recount {
        confusion,
        top1: hits as f64 / labels.len() as f64,
        mca: recalls.iter().sum::<f64>() / recalls.len() as f64,
    }
}

pub fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[..i] {
            let mut sq = 0.0;
            for k in 0..a.len() {
                sq += (a[k] - b[k]) * (a[k] - b[k]);
            }
            sum += sq.sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// `-log softmax(logits)[label]` by direct summation.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    m + z.ln() - logits[label]
}

/// Elementwise `-[y ln s + (1-y) ln(1-s)]` with `s = sigmoid(x)`.
pub fn bce(x: f64, y: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}
