//! 3D skeleton induction: aligns pooled video tokens with frozen skeleton
//! features and optionally classifies the projected features.
//!
//! Shapes per alignment level (batch axis omitted):
//!
//! | level  | target      | visual      |
//! |--------|-------------|-------------|
//! | global | `d_s`       | `d_v`       |
//! | local  | `T_s x d_s` | `T_v x d_v` |

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{loss_cls, TokenTensor};
use crate::error::{Error, Result};
use crate::heads::{HeadKind, ProjectionHead, Reduction};
use crate::nn::{ensure_finite, Dense, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignLevel {
    Global,
    Local,
}

impl AlignLevel {
    pub fn name(self) -> &'static str {
        match self {
            AlignLevel::Global => "global",
            AlignLevel::Local => "local",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alignment {
    #[default]
    Global,
    Local,
    GlobalLocal,
}

impl Alignment {
    pub const ALL: [Alignment; 3] = [Alignment::Global, Alignment::Local, Alignment::GlobalLocal];

    pub fn levels(self) -> &'static [AlignLevel] {
        match self {
            Alignment::Global => &[AlignLevel::Global],
            Alignment::Local => &[AlignLevel::Local],
            Alignment::GlobalLocal => &[AlignLevel::Global, AlignLevel::Local],
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Alignment::Global => "Global",
            Alignment::Local => "Local",
            Alignment::GlobalLocal => "Global+Local",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim3DConfig {
    pub enabled: bool,
    /// Tap layers; `None` means the deepest layer.
    pub layers: Option<Vec<usize>>,
    pub alignment: Alignment,
    pub classifier: bool,
    /// Fold over feature channels inside the squared error.
    pub mse_inner: Reduction,
    pub head: HeadKind,
}

impl Default for Sim3DConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            layers: None,
            alignment: Alignment::Global,
            classifier: true,
            mse_inner: Reduction::Mean,
            head: HeadKind::Fc,
        }
    }
}

impl Sim3DConfig {
    pub fn tap_layers(&self, depth: usize) -> Vec<usize> {
        self.layers.clone().unwrap_or_else(|| vec![depth])
    }
}

/// Frozen skeleton-model output `T_s x J x d_s` for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonFeatures {
    pub frames: usize,
    pub joints: usize,
    pub dim: usize,
    values: Vec<f32>,
}

impl SkeletonFeatures {
    pub fn new(frames: usize, joints: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || joints == 0 || dim == 0 {
            return Err(Error::Validation("skeleton features need positive extents".into()));
        }
        if values.len() != frames * joints * dim {
            return Err(Error::Validation(format!(
                "expected {} feature values, got {}",
                frames * joints * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("skeleton features contain non-finite values".into()));
        }
        Ok(Self { frames, joints, dim, values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, t: usize, j: usize, c: usize) -> f32 {
        self.values[(t * self.joints + j) * self.dim + c]
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.values, (self.frames, self.joints, self.dim), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks equally shaped features into `(B, T_s, J, d_s)`.
    pub fn stack(items: &[&SkeletonFeatures], dtype: DType) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| Error::Contract("empty feature batch".into()))?;
        let shape = (first.frames, first.joints, first.dim);
        if items.iter().any(|f| (f.frames, f.joints, f.dim) != shape) {
            return Err(Error::Contract("skeleton features in a batch differ in shape".into()));
        }
        let data: Vec<f32> = items.iter().flat_map(|f| f.values.iter().copied()).collect();
        let t = Tensor::from_vec(data, (items.len(), shape.0, shape.1, shape.2), &Device::Cpu)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Mean over `(t, j)`, length `d_s`.
    pub fn global_mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.values.chunks_exact(self.dim) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v as f64;
            }
        }
        let n = (self.frames * self.joints) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// Pools `(B, T_s, J, d_s)` targets: global `(B, d_s)`, local `(B, T_s, d_s)`.
pub fn pool_targets(y: &Tensor, level: AlignLevel) -> Result<Tensor> {
    let (b, t, j, d) = y.dims4()?;
    Ok(match level {
        AlignLevel::Global => y.reshape((b, t * j, d))?.mean(1)?,
        AlignLevel::Local => y.mean(2)?,
    })
}

/// Pools patch tokens (prefix rows dropped): global `(B, d_v)`, local `(B, T_v, d_v)`.
pub fn pool_visual(z: &TokenTensor, t_v: usize, s_v: usize, level: AlignLevel) -> Result<Tensor> {
    let patches = z.patch_tokens()?;
    let (b, n, d) = patches.dims3()?;
    if n != t_v * s_v {
        return Err(Error::Contract(format!("{n} patch tokens, expected {t_v} x {s_v}")));
    }
    Ok(match level {
        AlignLevel::Global => patches.mean(1)?,
        AlignLevel::Local => patches.reshape((b, t_v, s_v, d))?.mean(2)?,
    })
}

/// Rows of a `T_s`-long sequence that line up with `T_v` token frames:
/// uniform sampling when longer, the last row repeated when shorter.
pub fn reconcile_indices(t_s: usize, t_v: usize) -> Vec<usize> {
    if t_s >= t_v {
        (0..t_v).map(|i| i * t_s / t_v).collect()
    } else {
        (0..t_v).map(|i| i.min(t_s - 1)).collect()
    }
}

/// `(B, T_s, d_s) -> (B, T_v, d_s)`.
pub fn reconcile_time(y_local: &Tensor, t_v: usize) -> Result<Tensor> {
    let t_s = y_local.dim(1)?;
    if t_s == 0 || t_v == 0 {
        return Err(Error::Contract("sequence lengths must be positive".into()));
    }
    if t_s == t_v {
        return Ok(y_local.clone());
    }
    let idx: Vec<u32> = reconcile_indices(t_s, t_v).into_iter().map(|i| i as u32).collect();
    Ok(y_local.index_select(&Tensor::new(idx.as_slice(), y_local.device())?, 1)?)
}

/// Squared error folded by `inner` over channels, averaged over the batch
/// and, for local alignment, over the `T_v` time slots.
pub fn loss_align(target: &Tensor, pred: &Tensor, level: AlignLevel, inner: Reduction) -> Result<Tensor> {
    let want = match level {
        AlignLevel::Global => 2,
        AlignLevel::Local => 3,
    };
    if target.dims() != pred.dims() || pred.rank() != want {
        return Err(Error::Contract(format!(
            "{} alignment: target {:?} and prediction {:?} must match with rank {want}",
            level.name(),
            target.dims(),
            pred.dims()
        )));
    }
    ensure_finite(pred, "projected skeleton features")?;
    let sq = (pred - target)?.sqr()?;
    let per = inner.apply(&sq, sq.rank() - 1)?;
    Ok(per.mean_all()?)
}

/// Per-level losses of one 3D module.
#[derive(Debug, Clone)]
pub struct Sim3DLoss {
    pub align: Tensor,
    pub cls: Option<Tensor>,
}

impl Sim3DLoss {
    pub fn total(&self) -> Result<Tensor> {
        Ok(match &self.cls {
            Some(c) => (&self.align + c)?,
            None => self.align.clone(),
        })
    }
}

/// Alignment plus optional classification of the projected features. Local
/// predictions are averaged over time before the classifier.
pub fn loss_3d(
    target: &Tensor,
    pred: &Tensor,
    labels: &[usize],
    classifier: Option<&Dense>,
    level: AlignLevel,
    inner: Reduction,
) -> Result<Sim3DLoss> {
    let align = loss_align(target, pred, level, inner)?;
    let cls = classifier
        .map(|head| {
            let pooled = match level {
                AlignLevel::Global => pred.clone(),
                AlignLevel::Local => pred.mean(1)?,
            };
            loss_cls(&head.forward(&pooled)?, labels)
        })
        .transpose()?;
    Ok(Sim3DLoss { align, cls })
}

/// Projection (and classifier) for one level at one tap.
#[derive(Debug, Clone)]
pub struct LevelHead {
    pub level: AlignLevel,
    pub projection: ProjectionHead,
    pub classifier: Option<Dense>,
}

#[derive(Debug, Clone)]
pub struct Sim3DHead {
    layer: usize,
    inner: Reduction,
    heads: Vec<LevelHead>,
}

impl Sim3DHead {
    /// Parameters are declared train-only.
    pub fn new(
        scope: Scope,
        cfg: &Sim3DConfig,
        layer: usize,
        d_v: usize,
        d_s: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let mut scope = scope.train_only();
        let heads = cfg
            .alignment
            .levels()
            .iter()
            .map(|&level| {
                let mut s = scope.pp(level.name());
                Ok(LevelHead {
                    level,
                    projection: ProjectionHead::new(s.pp("proj"), cfg.head, d_v, d_s)?,
                    classifier: if cfg.classifier {
                        Some(Dense::new(s.pp("classifier"), d_s, num_classes)?)
                    } else {
                        None
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layer,
            inner: cfg.mse_inner,
            heads,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn heads(&self) -> &[LevelHead] {
        &self.heads
    }

    /// `features` is `(B, T_s, J, d_s)`; returns one loss per level.
    pub fn losses(
        &self,
        z: &TokenTensor,
        features: &Tensor,
        labels: &[usize],
        t_v: usize,
        s_v: usize,
    ) -> Result<Vec<Sim3DLoss>> {
        self.heads
            .iter()
            .map(|h| {
                let mut target = pool_targets(features, h.level)?;
                if h.level == AlignLevel::Local {
                    target = reconcile_time(&target, t_v)?;
                }
                let pred = project_f3d(&pool_visual(z, t_v, s_v, h.level)?, &h.projection)?;
                loss_3d(&target, &pred, labels, h.classifier.as_ref(), h.level, self.inner)
            })
            .collect()
    }
}

pub fn project_f3d(pooled: &Tensor, head: &ProjectionHead) -> Result<Tensor> {
    head.forward(pooled)
}

/// Per-channel standard deviation over every `(sample, t, j)` row.
pub fn channel_std(features: &[&SkeletonFeatures]) -> Result<Vec<f32>> {
    let dim = features
        .first()
        .ok_or_else(|| Error::Contract("no features to summarise".into()))?
        .dim;
    let mut sum = vec![0.0f64; dim];
    let mut sq = vec![0.0f64; dim];
    let mut n = 0usize;
    for f in features {
        if f.dim != dim {
            return Err(Error::Contract("feature widths differ".into()));
        }
        for row in f.values.chunks_exact(dim) {
            for c in 0..dim {
                sum[c] += row[c] as f64;
                sq[c] += (row[c] as f64).powi(2);
            }
            n += 1;
        }
    }
    Ok((0..dim)
        .map(|c| {
            let mean = sum[c] / n as f64;
            (sq[c] / n as f64 - mean * mean).max(0.0).sqrt() as f32
        })
        .collect())
}

/// Adds `U[0, level * sigma_c]` to every value of channel `c`.
pub fn add_feature_noise(y: &SkeletonFeatures, level: f64, sigma: &[f32], seed: u64) -> Result<SkeletonFeatures> {
    if !(level >= 0.0 && level.is_finite()) {
        return Err(Error::Config(format!("noise level must be non-negative, got {level}")));
    }
    if sigma.len() != y.dim {
        return Err(Error::Contract("one standard deviation per channel is required".into()));
    }
    if level == 0.0 {
        return Ok(y.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = y
        .values
        .chunks_exact(y.dim)
        .flat_map(|row| {
            row.iter()
                .zip(sigma)
                .map(|(&v, &s)| {
                    let hi = level * s as f64;
                    let offset = if hi > 0.0 { rng.random_range(0.0..=hi) } else { 0.0 };
                    (v as f64 + offset) as f32
                })
                .collect::<Vec<_>>()
        })
        .collect();
    SkeletonFeatures::new(y.frames, y.joints, y.dim, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar, ParamStore};

    fn cpu<const N: usize>(v: [f64; N], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn global_target_is_mean_over_time_and_joints() {
        let y = cpu([1., 2., 3., 4.], &[1, 2, 2, 1]);
        let g = pool_targets(&y, AlignLevel::Global).unwrap();
        assert_eq!(g.to_vec2::<f64>().unwrap(), vec![vec![2.5]]);
        let l = pool_targets(&y, AlignLevel::Local).unwrap();
        assert_eq!(l.dims(), &[1, 2, 1]);
    }

    #[test]
    fn reconcile_rules() {
        assert_eq!(reconcile_indices(8, 4), vec![0, 2, 4, 6]);
        assert_eq!(reconcile_indices(2, 4), vec![0, 1, 1, 1]);
        assert_eq!(reconcile_indices(4, 4), vec![0, 1, 2, 3]);
        let y = cpu([0., 1., 2., 3., 4., 5.], &[1, 3, 2]);
        let r = reconcile_time(&y, 5).unwrap();
        assert_eq!(
            r.squeeze(0).unwrap().to_vec2::<f64>().unwrap(),
            vec![vec![0., 1.], vec![2., 3.], vec![4., 5.], vec![4., 5.], vec![4., 5.]]
        );
    }

    #[test]
    fn align_loss_values() {
        let target = cpu([1., 3.], &[1, 2]);
        let pred = cpu([2., 2.], &[1, 2]);
        let l = loss_align(&target, &pred, AlignLevel::Global, Reduction::Mean).unwrap();
        assert_eq!(scalar(&l).unwrap(), 1.0);
        let l = loss_align(&target, &pred, AlignLevel::Global, Reduction::Sum).unwrap();
        assert_eq!(scalar(&l).unwrap(), 2.0);
        assert_eq!(scalar(&loss_align(&pred, &pred, AlignLevel::Global, Reduction::Mean).unwrap()).unwrap(), 0.0);
        let local = cpu([1., 2.], &[1, 2, 1]);
        assert!(matches!(
            loss_align(&target, &local.reshape((1, 2)).unwrap(), AlignLevel::Local, Reduction::Mean),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn classifier_toggle() {
        let mut store = ParamStore::new(DType::F64, 1);
        let head = Dense::new(store.root().pp("c"), 2, 4).unwrap();
        head.weight.set(&head.weight.zeros_like().unwrap()).unwrap();
        let target = cpu([1., 3.], &[1, 2]);
        let pred = cpu([2., 2.], &[1, 2]);
        let off = loss_3d(&target, &pred, &[1], None, AlignLevel::Global, Reduction::Mean).unwrap();
        assert_eq!(scalar(&off.total().unwrap()).unwrap(), 1.0);
        let on = loss_3d(&target, &pred, &[1], Some(&head), AlignLevel::Global, Reduction::Mean).unwrap();
        assert!((scalar(&on.total().unwrap()).unwrap() - (1.0 + 4f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn module_shapes_follow_level() {
        for alignment in Alignment::ALL {
            let mut store = ParamStore::new(DType::F64, 1);
            let cfg = Sim3DConfig {
                alignment,
                ..Default::default()
            };
            let m = Sim3DHead::new(store.root(), &cfg, 2, 8, 3, 4).unwrap();
            assert!(store.iter().all(|(_, p)| p.train_only));
            let z = TokenTensor {
                tokens: Tensor::ones((2, 1 + 2 * 4, 8), DType::F64, &Device::Cpu).unwrap(),
                layer: 2,
                prefix: 1,
            };
            let feats = Tensor::ones((2, 3, 5, 3), DType::F64, &Device::Cpu).unwrap();
            let losses = m.losses(&z, &feats, &[0, 1], 2, 4).unwrap();
            assert_eq!(losses.len(), alignment.levels().len());
        }
    }

    #[test]
    fn feature_noise_rules() {
        let y = SkeletonFeatures::new(2, 1, 2, vec![1., 2., 3., 4.]).unwrap();
        let sigma = channel_std(&[&y]).unwrap();
        assert_eq!(sigma, vec![1.0, 1.0]);
        assert_eq!(add_feature_noise(&y, 0.0, &sigma, 5).unwrap(), y);
        let a = add_feature_noise(&y, 2.0, &sigma, 5).unwrap();
        assert_eq!(a, add_feature_noise(&y, 2.0, &sigma, 5).unwrap());
        assert!(a.values().iter().zip(y.values()).all(|(n, c)| n >= c && *n <= c + 2.0));
        assert!(matches!(add_feature_noise(&y, -1.0, &sigma, 5), Err(Error::Config(_))));
    }
}
