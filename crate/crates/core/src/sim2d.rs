//! 2D skeleton induction: predicts which tokens contain which joints.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenTensor;
use crate::error::{Error, Result};
use crate::heads::{HeadKind, ProjectionHead, Reduction};
use crate::nn::{ensure_finite, Dense, Scope};
use crate::skelmap::{MapVariant, TokenSkeletonMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim2DConfig {
    pub enabled: bool,
    /// Tap layers; each gets its own head and their losses are summed.
    pub layers: Vec<usize>,
    /// Projection width; `None` keeps the backbone width.
    pub proj_dim: Option<usize>,
    pub head: HeadKind,
    pub variant: MapVariant,
    /// Fold over tokens after the per-token joint mean.
    pub reduction: Reduction,
}

impl Default for Sim2DConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            layers: vec![1],
            proj_dim: None,
            head: HeadKind::Fc,
            variant: MapVariant::Full,
            reduction: Reduction::Mean,
        }
    }
}

/// Per-token outputs of one head: logits `(B, N, C)` and, for the depth
/// variant, depth estimates `(B, N, J)`.
#[derive(Debug, Clone)]
pub struct Sim2DPrediction {
    pub logits: Tensor,
    pub depth: Option<Tensor>,
}

/// Stacked map targets for a batch.
#[derive(Debug, Clone)]
pub struct MapTargets {
    /// `(B, N, C)` in `{0, 1}`.
    pub presence: Tensor,
    /// `(B, N, J)` depths, zero where the bit is off.
    pub depth: Option<Tensor>,
}

impl MapTargets {
    pub fn stack(maps: &[&TokenSkeletonMap], dtype: DType) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Contract("empty map batch".into()))?;
        let (n, c) = (first.t_v() * first.s_v(), first.channels());
        let mut presence = Vec::with_capacity(maps.len() * n * c);
        let mut depth = first.depth_values().map(|_| Vec::with_capacity(maps.len() * n * c));
        for m in maps {
            if (m.t_v() * m.s_v(), m.channels(), m.variant) != (n, c, first.variant) {
                return Err(Error::Contract("maps in a batch differ in shape".into()));
            }
            presence.extend(m.targets());
            if let Some(d) = depth.as_mut() {
                d.extend_from_slice(m.depth_values().unwrap_or_default());
            }
        }
        let shape = (maps.len(), n, c);
        Ok(Self {
            presence: Tensor::from_vec(presence, shape, &Device::Cpu)?.to_dtype(dtype)?,
            depth: depth
                .map(|d| Tensor::from_vec(d, shape, &Device::Cpu)?.to_dtype(dtype))
                .transpose()?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Sim2DHead {
    layer: usize,
    variant: MapVariant,
    projection: ProjectionHead,
    classifier: Dense,
    depth: Option<Dense>,
}

impl Sim2DHead {
    /// Parameters are declared train-only.
    pub fn new(scope: Scope, cfg: &Sim2DConfig, layer: usize, d_v: usize, joints: usize) -> Result<Self> {
        let mut scope = scope.train_only();
        let d_b = cfg.proj_dim.unwrap_or(d_v);
        let channels = if cfg.variant == MapVariant::Flat { 1 } else { joints };
        Ok(Self {
            layer,
            variant: cfg.variant,
            projection: ProjectionHead::new(scope.pp("proj"), cfg.head, d_v, d_b)?,
            classifier: Dense::new(scope.pp("classifier"), d_b, channels)?,
            depth: if cfg.variant == MapVariant::Depth {
                Some(Dense::new(scope.pp("depth"), d_b, joints)?)
            } else {
                None
            },
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn variant(&self) -> MapVariant {
        self.variant
    }

    pub fn classifier(&self) -> &Dense {
        &self.classifier
    }

    /// Prefix rows (class and extra tokens) are excluded.
    pub fn predict_token_map(&self, z: &TokenTensor) -> Result<Sim2DPrediction> {
        let features = self.projection.forward(&z.patch_tokens()?)?;
        Ok(Sim2DPrediction {
            logits: self.classifier.forward(&features)?,
            depth: self.depth.as_ref().map(|d| d.forward(&features)).transpose()?,
        })
    }

    pub fn loss(&self, pred: &Sim2DPrediction, target: &MapTargets, reduction: Reduction) -> Result<Tensor> {
        let mut loss = loss_2d(&pred.logits, &target.presence, reduction)?;
        if let (Some(p), Some(t)) = (&pred.depth, &target.depth) {
            loss = (loss + masked_depth_loss(p, t, &target.presence)?)?;
        } else if self.variant == MapVariant::Depth {
            return Err(Error::Contract("depth head needs depth targets".into()));
        }
        Ok(loss)
    }
}

/// `softplus(x) - x y`, the numerically stable sigmoid cross-entropy.
pub fn bce_with_logits(logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (logits * target)?)?)
}

/// Binary cross-entropy averaged over channels per token, then folded over
/// tokens by `reduction` and averaged over the batch.
pub fn loss_2d(logits: &Tensor, target: &Tensor, reduction: Reduction) -> Result<Tensor> {
    if logits.dims() != target.dims() || logits.rank() != 3 {
        return Err(Error::Contract(format!(
            "map logits {:?} and targets {:?} must be equal (B, N, C)",
            logits.dims(),
            target.dims()
        )));
    }
    ensure_finite(logits, "token map logits")?;
    let per_token = bce_with_logits(logits, target)?.mean(D::Minus1)?;
    Ok(reduction.apply(&per_token, 1)?.mean_all()?)
}

/// Mean squared depth error over set bits; zero when no bit is set.
pub fn masked_depth_loss(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    ensure_finite(pred, "depth predictions")?;
    let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let sq = ((pred - target)?.sqr()? * mask)?.sum_all()?;
    Ok((sq / count.max(1.0))?)
}
