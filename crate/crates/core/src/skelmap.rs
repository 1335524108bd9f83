//! Pixel-level joint maps and their max-pooled token-level counterpart.
//!
//! Joint coordinates are discretised here and nowhere else: a record at
//! `(x, y)` occupies pixel `(floor(y), floor(x))`, and records whose pixel
//! falls outside the frame are dropped.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::{JointRecord, Skeleton2DSequence, Skeleton3DSequence};
use crate::error::{Error, Result};
use crate::store;

pub const MAP_CACHE_MAGIC: &[u8; 8] = b"PIVITMAP";
pub const MAP_CACHE_FORMAT_TAG: &str = "pivit-map/1";

/// Binary `T x H x W x J` occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelJointMap {
    frames: usize,
    height: usize,
    width: usize,
    joints: usize,
    bits: Vec<bool>,
}

impl PixelJointMap {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.joints)
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, w: usize, j: usize) -> bool {
        self.bits[((t * self.height + h) * self.width + w) * self.joints + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn pixel_of(e: &JointRecord<2>, height: usize, width: usize) -> Option<(usize, usize)> {
    let (h, w) = (e.y().floor(), e.x().floor());
    (h >= 0.0 && w >= 0.0 && h < height as f64 && w < width as f64).then_some((h as usize, w as usize))
}

pub fn build_pixel_map(pose: &Skeleton2DSequence, frames: usize, height: usize, width: usize) -> Result<PixelJointMap> {
    build_pixel_map_dilated(pose, frames, height, width, 0)
}

/// Like [`build_pixel_map`] but also marks every pixel within Chebyshev
/// distance `radius` of each joint pixel (clipped to the frame).
pub fn build_pixel_map_dilated(
    pose: &Skeleton2DSequence,
    frames: usize,
    height: usize,
    width: usize,
    radius: usize,
) -> Result<PixelJointMap> {
    if pose.num_frames() != frames {
        return Err(Error::Contract(format!(
            "pose has {} frames, map wants {frames}",
            pose.num_frames()
        )));
    }
    let joints = pose.num_joints();
    let mut bits = vec![false; frames * height * width * joints];
    for e in pose.entries() {
        let Some((h, w)) = pixel_of(e, height, width) else {
            continue;
        };
        for hh in h.saturating_sub(radius)..=(h + radius).min(height - 1) {
            for ww in w.saturating_sub(radius)..=(w + radius).min(width - 1) {
                bits[((e.t * height + hh) * width + ww) * joints + e.j] = true;
            }
        }
    }
    Ok(PixelJointMap {
        frames,
        height,
        width,
        joints,
        bits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapVariant {
    /// One channel per joint.
    Full,
    /// A single "any joint" channel.
    Flat,
    /// Per-joint channels plus the depth of the joint that set each bit.
    Depth,
}

/// How pixels group into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tau: usize,
    pub patch: usize,
}

impl MapGeometry {
    pub fn from_config(cfg: &BackboneConfig) -> Self {
        Self {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            tau: cfg.tau,
            patch: cfg.patch,
        }
    }

    pub fn t_v(&self) -> usize {
        self.frames.div_ceil(self.tau)
    }

    pub fn grid_w(&self) -> usize {
        self.width.div_ceil(self.patch)
    }

    pub fn s_v(&self) -> usize {
        self.height.div_ceil(self.patch) * self.grid_w()
    }

    /// Token coordinates `(t', s)` of pixel `(t, h, w)`.
    pub fn token_of(&self, t: usize, h: usize, w: usize) -> (usize, usize) {
        (t / self.tau, (h / self.patch) * self.grid_w() + w / self.patch)
    }
}

/// Binary `T_v x S_v x channels` token occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSkeletonMap {
    pub geometry: MapGeometry,
    pub variant: MapVariant,
    channels: usize,
    y: Vec<bool>,
    /// `T_v x S_v x J` depths, meaningful only where the bit is set (zero elsewhere).
    depth: Option<Vec<f32>>,
}

impl TokenSkeletonMap {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn t_v(&self) -> usize {
        self.geometry.t_v()
    }

    pub fn s_v(&self) -> usize {
        self.geometry.s_v()
    }

    #[inline]
    pub fn get(&self, t: usize, s: usize, c: usize) -> bool {
        self.y[(t * self.s_v() + s) * self.channels + c]
    }

    pub fn bits(&self) -> &[bool] {
        &self.y
    }

    pub fn depth_values(&self) -> Option<&[f32]> {
        self.depth.as_deref()
    }

    pub fn count_ones(&self) -> usize {
        self.y.iter().filter(|&&b| b).count()
    }

    /// Targets as `0.0 / 1.0`, row-major `(token, channel)`.
    pub fn targets(&self) -> Vec<f32> {
        self.y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Tokens with at least one set channel, as flat indices `t' * S_v + s`.
    pub fn occupied_tokens(&self) -> Vec<usize> {
        (0..self.t_v() * self.s_v())
            .filter(|&tok| (0..self.channels).any(|c| self.y[tok * self.channels + c]))
            .collect()
    }

    /// Permutes the channel axis: output channel `i` is input channel `perm[i]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.channels {
            return Err(Error::Contract("permutation length differs from channel count".into()));
        }
        let n = self.t_v() * self.s_v();
        let mut y = vec![false; self.y.len()];
        for tok in 0..n {
            for (i, &src) in perm.iter().enumerate() {
                y[tok * self.channels + i] = self.y[tok * self.channels + src];
            }
        }
        Ok(Self { y, ..self.clone() })
    }
}

/// Max-pools `m` with a `tau x p x p` window (edge windows truncated).
pub fn pool_token_map(m: &PixelJointMap, cfg: &BackboneConfig) -> Result<TokenSkeletonMap> {
    let geometry = MapGeometry::from_config(cfg);
    if (m.frames, m.height, m.width) != (geometry.frames, geometry.height, geometry.width) {
        return Err(Error::Contract(format!(
            "pixel map {:?} does not match model input {:?}",
            (m.frames, m.height, m.width),
            (geometry.frames, geometry.height, geometry.width)
        )));
    }
    let j_n = m.joints;
    let s_v = geometry.s_v();
    let mut y = vec![false; geometry.t_v() * s_v * j_n];
    for t in 0..m.frames {
        for h in 0..m.height {
            for w in 0..m.width {
                let (tv, s) = geometry.token_of(t, h, w);
                let src = ((t * m.height + h) * m.width + w) * j_n;
                let dst = (tv * s_v + s) * j_n;
                for j in 0..j_n {
                    y[dst + j] |= m.bits[src + j];
                }
            }
        }
    }
    Ok(TokenSkeletonMap {
        geometry,
        variant: MapVariant::Full,
        channels: j_n,
        y,
        depth: None,
    })
}

/// Builds the full per-joint token map straight from a pose.
pub fn token_map(pose: &Skeleton2DSequence, cfg: &BackboneConfig) -> Result<TokenSkeletonMap> {
    pool_token_map(&build_pixel_map(pose, cfg.frames, cfg.height, cfg.width)?, cfg)
}

/// Derives the flat or depth variant from a full map. `pose2d` must be the
/// pose the full map was built from; `pose3d` supplies depths.
pub fn make_variant(
    full: &TokenSkeletonMap,
    variant: MapVariant,
    pose2d: &Skeleton2DSequence,
    pose3d: Option<&Skeleton3DSequence>,
) -> Result<TokenSkeletonMap> {
    if full.variant != MapVariant::Full {
        return Err(Error::Contract("variants are derived from a full map".into()));
    }
    let n = full.t_v() * full.s_v();
    let j_n = full.channels;
    match variant {
        MapVariant::Full => Ok(full.clone()),
        MapVariant::Flat => {
            let y = (0..n)
                .map(|tok| full.y[tok * j_n..(tok + 1) * j_n].iter().any(|&b| b))
                .collect();
            Ok(TokenSkeletonMap {
                variant: MapVariant::Flat,
                channels: 1,
                y,
                depth: None,
                ..full.clone()
            })
        }
        MapVariant::Depth => {
            let pose3d = pose3d.ok_or_else(|| Error::Config("depth map variant needs 3D poses".into()))?;
            let g = full.geometry;
            let mut depth = vec![f32::INFINITY; n * j_n];
            for e in pose2d.entries() {
                let Some((h, w)) = pixel_of(e, g.height, g.width) else {
                    continue;
                };
                let z = pose3d
                    .get(e.t, e.j)
                    .ok_or_else(|| {
                        Error::Validation(format!("no 3D record for (t={}, j={})", e.t + 1, e.j + 1))
                    })?
                    .z() as f32;
                let (tv, s) = g.token_of(e.t, h, w);
                let slot = &mut depth[(tv * g.s_v() + s) * j_n + e.j];
                *slot = slot.min(z);
            }
            for (d, &bit) in depth.iter_mut().zip(&full.y) {
                if !bit || !d.is_finite() {
                    *d = 0.0;
                }
            }
            Ok(TokenSkeletonMap {
                variant: MapVariant::Depth,
                depth: Some(depth),
                ..full.clone()
            })
        }
    }
}

/// Adds independent `U[0, level]` offsets to every `x` and `y`.
pub fn add_pixel_noise(pose: &Skeleton2DSequence, level: f64, seed: u64) -> Result<Skeleton2DSequence> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Config(format!("noise level must be non-negative, got {level}")));
    }
    if level == 0.0 {
        return Ok(pose.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pose.map_positions(|e| [e.x() + rng.random_range(0.0..=level), e.y() + rng.random_range(0.0..=level)])
}

/// Intersection over union of set bits; two empty maps score 1.
pub fn map_iou(a: &TokenSkeletonMap, b: &TokenSkeletonMap) -> Result<f64> {
    if a.y.len() != b.y.len() {
        return Err(Error::Contract("maps differ in shape".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.y.iter().zip(&b.y) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Serialize, Deserialize)]
struct MapCacheHeader {
    format: String,
    #[serde(rename = "T_v")]
    t_v: usize,
    #[serde(rename = "S_v")]
    s_v: usize,
    #[serde(rename = "J")]
    channels: usize,
    variant: MapVariant,
    geometry: MapGeometry,
}

/// Header plus bits packed LSB-first, row-major `(t, s, j)`; depth maps append
/// `T_v * S_v * J` little-endian `f32` values.
pub fn write_map_cache(path: &Path, map: &TokenSkeletonMap) -> Result<()> {
    let header = MapCacheHeader {
        format: MAP_CACHE_FORMAT_TAG.into(),
        t_v: map.t_v(),
        s_v: map.s_v(),
        channels: map.channels,
        variant: map.variant,
        geometry: map.geometry,
    };
    let mut payload = vec![0u8; map.y.len().div_ceil(8)];
    for (i, _) in map.y.iter().enumerate().filter(|(_, &b)| b) {
        payload[i / 8] |= 1 << (i % 8);
    }
    if let Some(depth) = &map.depth {
        payload.extend(depth.iter().flat_map(|v| v.to_le_bytes()));
    }
    store::write_framed(path, MAP_CACHE_MAGIC, &header, &payload)
}

pub fn read_map_cache(path: &Path) -> Result<TokenSkeletonMap> {
    let (header, payload): (MapCacheHeader, _) = store::read_framed(path, MAP_CACHE_MAGIC)?;
    if header.format != MAP_CACHE_FORMAT_TAG {
        return Err(Error::format(path, format!("unknown format {}", header.format)));
    }
    let g = header.geometry;
    if (g.t_v(), g.s_v()) != (header.t_v, header.s_v) {
        return Err(Error::format(path, "geometry disagrees with declared T_v/S_v"));
    }
    let n = header.t_v * header.s_v * header.channels;
    let packed = n.div_ceil(8);
    let depth_len = if header.variant == MapVariant::Depth { 4 * n } else { 0 };
    if payload.len() != packed + depth_len {
        return Err(Error::format(path, "payload length mismatch"));
    }
    let y = (0..n).map(|i| payload[i / 8] & (1 << (i % 8)) != 0).collect();
    let depth = (header.variant == MapVariant::Depth).then(|| {
        payload[packed..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    });
    Ok(TokenSkeletonMap {
        geometry: g,
        variant: header.variant,
        channels: header.channels,
        y,
        depth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(frames: usize, joints: usize, recs: &[(usize, usize, f64, f64)]) -> Skeleton2DSequence {
        Skeleton2DSequence::new(
            frames,
            joints,
            recs.iter().map(|&(t, j, x, y)| JointRecord { t, j, pos: [x, y] }).collect(),
        )
        .unwrap()
    }

    fn cfg(frames: usize, height: usize, width: usize, tau: usize, patch: usize) -> BackboneConfig {
        BackboneConfig {
            frames,
            height,
            width,
            tau,
            patch,
            ..Default::default()
        }
    }

    #[test]
    fn floor_rule_and_drop_rule() {
        let m = build_pixel_map(&pose(1, 1, &[(0, 0, 1.7, 0.2)]), 1, 4, 4).unwrap();
        assert!(m.get(0, 0, 1, 0));
        assert_eq!(m.count_ones(), 1);
        let m = build_pixel_map(&pose(1, 1, &[(0, 0, -3.0, 1.0)]), 1, 4, 4).unwrap();
        assert_eq!(m.count_ones(), 0);
        let m = build_pixel_map(&pose(1, 1, &[(0, 0, 1.0, 4.0)]), 1, 4, 4).unwrap();
        assert_eq!(m.count_ones(), 0);
    }

    #[test]
    fn pooling_window_membership() {
        let c = cfg(1, 4, 4, 1, 2);
        let m = build_pixel_map(&pose(1, 1, &[(0, 0, 1.0, 0.0)]), 1, 4, 4).unwrap();
        let y = pool_token_map(&m, &c).unwrap();
        assert_eq!((y.t_v(), y.s_v(), y.channels()), (1, 4, 1));
        assert_eq!(y.bits(), &[true, false, false, false]);

        let empty = build_pixel_map(&pose(1, 3, &[]), 1, 4, 4).unwrap();
        assert_eq!(pool_token_map(&empty, &c).unwrap().count_ones(), 0);
    }

    #[test]
    fn flat_and_depth_variants() {
        let c = cfg(1, 4, 4, 1, 4);
        let p2 = pose(1, 3, &[(0, 0, 0.5, 0.5), (0, 2, 2.5, 3.5)]);
        let full = token_map(&p2, &c).unwrap();
        assert_eq!(full.bits(), &[true, false, true]);
        let flat = make_variant(&full, MapVariant::Flat, &p2, None).unwrap();
        assert_eq!((flat.channels(), flat.bits()), (1, &[true][..]));

        let empty = token_map(&pose(1, 3, &[]), &c).unwrap();
        let flat = make_variant(&empty, MapVariant::Flat, &pose(1, 3, &[]), None).unwrap();
        assert_eq!(flat.count_ones(), 0);

        assert!(matches!(
            make_variant(&full, MapVariant::Depth, &p2, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn depth_takes_nearest_entry_in_window() {
        // tau = 2 so both frames of joint 0 pool into one window
        let c = cfg(2, 4, 4, 2, 4);
        let p2 = pose(2, 1, &[(0, 0, 1.0, 1.0), (1, 0, 2.0, 2.0)]);
        let p3 = Skeleton3DSequence::new(
            2,
            1,
            vec![
                JointRecord { t: 0, j: 0, pos: [0.0, 0.0, 2.0] },
                JointRecord { t: 1, j: 0, pos: [0.0, 0.0, 1.5] },
            ],
        )
        .unwrap();
        let full = token_map(&p2, &c).unwrap();
        let d = make_variant(&full, MapVariant::Depth, &p2, Some(&p3)).unwrap();
        assert_eq!(d.bits(), full.bits());
        assert_eq!(d.depth_values().unwrap(), &[1.5]);
    }

    #[test]
    fn pixel_noise_rules() {
        let p = pose(2, 2, &[(0, 0, 1.0, 2.0), (1, 1, 3.0, 4.0)]);
        assert_eq!(add_pixel_noise(&p, 0.0, 9).unwrap(), p);
        let a = add_pixel_noise(&p, 40.0, 9).unwrap();
        assert_eq!(a, add_pixel_noise(&p, 40.0, 9).unwrap());
        for (n, o) in a.entries().iter().zip(p.entries()) {
            let (dx, dy) = (n.x() - o.x(), n.y() - o.y());
            assert!((0.0..=40.0).contains(&dx) && (0.0..=40.0).contains(&dy));
        }
        assert!(matches!(add_pixel_noise(&p, -1.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dilation_grows_footprint() {
        let p = pose(1, 1, &[(0, 0, 2.0, 2.0)]);
        assert_eq!(build_pixel_map_dilated(&p, 1, 5, 5, 1).unwrap().count_ones(), 9);
        assert_eq!(build_pixel_map_dilated(&p, 1, 5, 5, 0).unwrap().count_ones(), 1);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(2, 9, 7, 2, 4);
        let p2 = pose(2, 3, &[(0, 0, 0.5, 0.5), (1, 2, 6.5, 8.5), (1, 1, 3.0, 3.0)]);
        let p3 = Skeleton3DSequence::new(
            2,
            3,
            p2.entries().iter().map(|e| JointRecord { t: e.t, j: e.j, pos: [0.0, 0.0, e.x()] }).collect(),
        )
        .unwrap();
        let full = token_map(&p2, &c).unwrap();
        for variant in [MapVariant::Full, MapVariant::Flat, MapVariant::Depth] {
            let m = make_variant(&full, variant, &p2, Some(&p3)).unwrap();
            let path = dir.path().join("m.bin");
            write_map_cache(&path, &m).unwrap();
            assert_eq!(read_map_cache(&path).unwrap(), m);
        }
    }
}
