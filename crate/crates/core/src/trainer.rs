//! The pose-induced model: backbone plus removable induction modules,
//! its training loop, distillation baselines, stripping and late fusion.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{loss_cls, patchify, Backbone, BackboneConfig, TokenTensor};
use crate::data::{LabeledSample, VideoClip};
use crate::error::{Error, Result};
use crate::nn::{scalar, Dense, ParamStore};
use crate::optim::{CosineSchedule, OptimizerKind, SgdConfig, TrainOptimizer};
use crate::provider::{ProviderConfig, SkeletonFeatureProvider};
use crate::sim2d::{MapTargets, Sim2DConfig, Sim2DHead};
use crate::sim3d::{add_feature_noise, channel_std, Sim3DConfig, Sim3DHead, SkeletonFeatures};
use crate::skelmap::{add_pixel_noise, make_variant, token_map, MapVariant, TokenSkeletonMap};
use crate::store;
use crate::synth::SyntheticSpec;

pub const CHECKPOINT_FORMAT_TAG: &str = "pivit-ckpt/1";
pub const TRAIN_LOG_FORMAT_TAG: &str = "pivit-trainlog/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdBaseline {
    #[default]
    None,
    FdClass,
    FdDistill,
    LdClass,
    LdDistill,
}

impl KdBaseline {
    pub const ALL: [KdBaseline; 4] = [
        KdBaseline::FdClass,
        KdBaseline::FdDistill,
        KdBaseline::LdClass,
        KdBaseline::LdDistill,
    ];

    pub fn uses_distill_token(self) -> bool {
        matches!(self, KdBaseline::FdDistill | KdBaseline::LdDistill)
    }

    pub fn is_feature(self) -> bool {
        matches!(self, KdBaseline::FdClass | KdBaseline::FdDistill)
    }

    pub fn label(self) -> &'static str {
        match self {
            KdBaseline::None => "none",
            KdBaseline::FdClass => "FD with class token",
            KdBaseline::FdDistill => "FD with distillation token",
            KdBaseline::LdClass => "LD with class token",
            KdBaseline::LdDistill => "LD with distillation token",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub sim2d: f64,
    pub sim3d: f64,
    pub kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            sim2d: 1.0,
            sim3d: 1.0,
            kd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    pub kd: KdBaseline,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 2,
            optimizer: OptimizerKind::AdamW,
            weights: LossWeights::default(),
            kd: KdBaseline::None,
            precision: Precision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub weight_rgb: f64,
    pub weight_pose: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            weight_rgb: 0.5,
            weight_pose: 0.5,
        }
    }
}

/// Training-time pose corruption: pixels for 2D, multiples of the
/// per-channel feature deviation for 3D.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub pixel: f64,
    pub feature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub heldout_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            heldout_per_class: 16,
        }
    }
}

/// Everything a run depends on; mirrors the CLI config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub sim2d: Sim2DConfig,
    pub sim3d: Sim3DConfig,
    pub provider: ProviderConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub noise: NoiseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            sim2d: Sim2DConfig::default(),
            sim3d: Sim3DConfig::default(),
            provider: ProviderConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            noise: NoiseConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The same run with both induction modules and distillation turned off.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.sim2d.enabled = false;
        cfg.sim3d.enabled = false;
        cfg.train.kd = KdBaseline::None;
        cfg
    }

    pub fn sim2d_active(&self) -> bool {
        self.sim2d.enabled && self.train.kd == KdBaseline::None
    }

    pub fn sim3d_active(&self) -> bool {
        self.sim3d.enabled && self.train.kd == KdBaseline::None
    }

    /// Whether preparing data needs a skeleton provider.
    pub fn needs_provider(&self) -> bool {
        self.sim3d_active() || self.train.kd != KdBaseline::None
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.data.synthetic.validate()?;
        let s = &self.data.synthetic;
        if (s.frames, s.height, s.width) != (self.backbone.frames, self.backbone.height, self.backbone.width) {
            return Err(Error::Config(format!(
                "data clips are {}x{}x{} but the backbone expects {}x{}x{}",
                s.frames, s.height, s.width, self.backbone.frames, self.backbone.height, self.backbone.width
            )));
        }
        if s.num_classes != self.backbone.num_classes {
            return Err(Error::Config("data and backbone disagree on class count".into()));
        }
        if self.sim2d.enabled {
            self.backbone.check_layers(&self.sim2d.layers)?;
            if self.sim2d.layers.is_empty() {
                return Err(Error::Config("sim2d.layers is empty".into()));
            }
            if self.sim2d.proj_dim == Some(0) {
                return Err(Error::Config("sim2d.proj_dim must be positive".into()));
            }
        }
        if self.sim3d.enabled {
            let layers = self.sim3d.tap_layers(self.backbone.depth);
            self.backbone.check_layers(&layers)?;
            if layers.is_empty() {
                return Err(Error::Config("sim3d.layers is empty".into()));
            }
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 {
            return Err(Error::Config("train.lr, train.momentum or train.weight_decay out of range".into()));
        }
        let w = &t.weights;
        if [w.cls, w.sim2d, w.sim3d, w.kd].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        let f = &self.fusion;
        if f.weight_rgb < 0.0 || f.weight_pose < 0.0 || f.weight_rgb + f.weight_pose <= 0.0 {
            return Err(Error::Config("fusion weights must be non-negative with a positive sum".into()));
        }
        if self.noise.pixel < 0.0 || self.noise.feature < 0.0 {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// One training sample with every target the run needs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub label: usize,
    pub patches: Vec<f32>,
    pub map: Option<TokenSkeletonMap>,
    pub features: Option<SkeletonFeatures>,
    pub teacher_logits: Option<Vec<f32>>,
}

fn missing(sample: &LabeledSample, what: &str) -> Error {
    Error::Data {
        sample: sample.clip.id.clone(),
        msg: format!("{what} is required by the enabled modules"),
    }
}

/// Builds maps, provider features and teacher logits for `samples`.
/// Noise from `cfg.noise` is applied with per-sample seeds derived from `cfg.seed`.
pub fn prepare(
    samples: &[LabeledSample],
    cfg: &ExperimentConfig,
    provider: Option<&dyn SkeletonFeatureProvider>,
) -> Result<Vec<PreparedSample>> {
    cfg.validate()?;
    let provider = match (cfg.needs_provider(), provider) {
        (true, None) => return Err(Error::Config("these modules need a skeleton provider".into())),
        (true, Some(p)) => {
            if p.descriptor().d_s != cfg.provider.d_s {
                return Err(Error::Config(format!(
                    "provider emits d_s = {}, config says {}",
                    p.descriptor().d_s,
                    cfg.provider.d_s
                )));
            }
            Some(p)
        }
        (false, _) => None,
    };
    let need_map = cfg.sim2d_active();
    let need_features = cfg.sim3d_active() || cfg.train.kd.is_feature();
    let need_teacher = matches!(cfg.train.kd, KdBaseline::LdClass | KdBaseline::LdDistill);
    let mut prepared = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let clip = &s.clip;
            clip.check_label(cfg.backbone.num_classes)?;
            let map = if need_map {
                let pose = s.pose2d.as_ref().ok_or_else(|| missing(s, "a 2D pose"))?;
                let pose = add_pixel_noise(pose, cfg.noise.pixel, mix_seed(cfg.seed, i as u64))?;
                let full = token_map(&pose, &cfg.backbone)?;
                let pose3d = match cfg.sim2d.variant {
                    MapVariant::Depth => Some(s.pose3d.as_ref().ok_or_else(|| missing(s, "a 3D pose"))?),
                    _ => None,
                };
                Some(make_variant(&full, cfg.sim2d.variant, &pose, pose3d)?)
            } else {
                None
            };
            let pose3d = || s.pose3d.as_ref().ok_or_else(|| missing(s, "a 3D pose"));
            let features = match (need_features, provider) {
                (true, Some(p)) => Some(p.produce(pose3d()?)?),
                _ => None,
            };
            let teacher_logits = match (need_teacher, provider) {
                (true, Some(p)) => Some(p.probe_logits(pose3d()?)?),
                _ => None,
            };
            Ok(PreparedSample {
                id: clip.id.clone(),
                label: clip.label,
                patches: patchify(clip, &cfg.backbone)?,
                map,
                features,
                teacher_logits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.noise.feature > 0.0 && need_features {
        let feats: Vec<&SkeletonFeatures> = prepared.iter().filter_map(|p| p.features.as_ref()).collect();
        let sigma = channel_std(&feats)?;
        for (i, p) in prepared.iter_mut().enumerate() {
            if let Some(f) = &p.features {
                let seed = mix_seed(cfg.seed ^ 0xfea7, i as u64);
                p.features = Some(add_feature_noise(f, cfg.noise.feature, &sigma, seed)?);
            }
        }
    }
    Ok(prepared)
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Batched tensors for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub patches: Tensor,
    pub labels: Vec<usize>,
    pub maps: Option<MapTargets>,
    pub features: Option<Tensor>,
    pub teacher_logits: Option<Tensor>,
}

impl Batch {
    pub fn collate(items: &[&PreparedSample], cfg: &BackboneConfig, dtype: DType) -> Result<Self> {
        let b = items.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        let data: Vec<f32> = items.iter().flat_map(|s| s.patches.iter().copied()).collect();
        let patches = Tensor::from_vec(data, (b, cfg.num_patches(), cfg.patch_dim()), &Device::Cpu)?.to_dtype(dtype)?;
        let all = |f: &dyn Fn(&PreparedSample) -> bool| items.iter().all(|s| f(s));
        let maps = if all(&|s| s.map.is_some()) {
            let maps: Vec<&TokenSkeletonMap> = items.iter().filter_map(|s| s.map.as_ref()).collect();
            Some(MapTargets::stack(&maps, dtype)?)
        } else {
            None
        };
        let features = if all(&|s| s.features.is_some()) {
            let f: Vec<&SkeletonFeatures> = items.iter().filter_map(|s| s.features.as_ref()).collect();
            Some(SkeletonFeatures::stack(&f, dtype)?)
        } else {
            None
        };
        let teacher_logits = if all(&|s| s.teacher_logits.is_some()) {
            let c = items[0].teacher_logits.as_ref().map_or(0, Vec::len);
            let v: Vec<f32> = items
                .iter()
                .flat_map(|s| s.teacher_logits.iter().flatten().copied())
                .collect();
            Some(Tensor::from_vec(v, (b, c), &Device::Cpu)?.to_dtype(dtype)?)
        } else {
            None
        };
        Ok(Self {
            ids: items.iter().map(|s| s.id.clone()).collect(),
            patches,
            labels: items.iter().map(|s| s.label).collect(),
            maps,
            features,
            teacher_logits,
        })
    }

    fn missing(&self, what: &str) -> Error {
        Error::Data {
            sample: self.ids.first().cloned().unwrap_or_default(),
            msg: format!("batch lacks {what}"),
        }
    }
}

/// Loss decomposition of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_v_cls: f64,
    pub l_2d: f64,
    pub l_3d_align: f64,
    pub l_3d_cls: f64,
    pub l_kd: f64,
    pub total: f64,
}

impl LossBundle {
    /// The weighted sum the total must equal.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        w.cls * self.l_v_cls + w.sim2d * self.l_2d + w.sim3d * (self.l_3d_align + self.l_3d_cls) + w.kd * self.l_kd
    }
}

/// Graph-carrying losses, before conversion to numbers.
pub struct LossTensors {
    pub l_v_cls: Tensor,
    pub l_2d: Option<Tensor>,
    pub l_3d_align: Option<Tensor>,
    pub l_3d_cls: Option<Tensor>,
    pub l_kd: Option<Tensor>,
    pub total: Tensor,
    pub logits: Tensor,
}

impl LossTensors {
    pub fn bundle(&self) -> Result<LossBundle> {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), scalar);
        Ok(LossBundle {
            l_v_cls: scalar(&self.l_v_cls)?,
            l_2d: v(&self.l_2d)?,
            l_3d_align: v(&self.l_3d_align)?,
            l_3d_cls: v(&self.l_3d_cls)?,
            l_kd: v(&self.l_kd)?,
            total: scalar(&self.total)?,
        })
    }
}

#[derive(Debug, Clone)]
struct KdModule {
    kind: KdBaseline,
    token: Option<Var>,
    adapter: Option<Dense>,
    distill_head: Option<Dense>,
}

fn add_opt(acc: Option<Tensor>, t: Tensor) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => (a + t)?,
        None => t,
    }))
}

/// Soft cross-entropy `-sum p_teacher log softmax(student)`, batch mean.
pub fn soft_cross_entropy(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::softmax(teacher, D::Minus1)?;
    let log_q = candle_nn::ops::log_softmax(student, D::Minus1)?;
    Ok((p * log_q)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// Backbone plus train-time modules sharing one parameter store.
pub struct PiVit {
    cfg: ExperimentConfig,
    joints: usize,
    store: ParamStore,
    backbone: Backbone,
    sim2d: Vec<Sim2DHead>,
    sim3d: Vec<Sim3DHead>,
    kd: Option<KdModule>,
}

impl PiVit {
    pub fn new(cfg: &ExperimentConfig, joints: usize) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.train.precision.dtype();
        let mut store = ParamStore::new(dtype, cfg.seed);
        let d_v = cfg.backbone.dim;
        let backbone = Backbone::new(store.root().pp("backbone"), &cfg.backbone)?;
        let mut sim2d = Vec::new();
        if cfg.sim2d_active() {
            for &l in &cfg.sim2d.layers {
                let mut root = store.root();
                let mut scope = root.pp("sim2d");
                sim2d.push(Sim2DHead::new(scope.pp(format!("l{l}")), &cfg.sim2d, l, d_v, joints)?);
            }
        }
        let mut sim3d = Vec::new();
        if cfg.sim3d_active() {
            for l in cfg.sim3d.tap_layers(cfg.backbone.depth) {
                let mut root = store.root();
                let mut scope = root.pp("sim3d");
                sim3d.push(Sim3DHead::new(
                    scope.pp(format!("l{l}")),
                    &cfg.sim3d,
                    l,
                    d_v,
                    cfg.provider.d_s,
                    cfg.backbone.num_classes,
                )?);
            }
        }
        let kd = match cfg.train.kd {
            KdBaseline::None => None,
            kind => {
                let mut root = store.root();
                let mut scope = root.pp("kd").train_only();
                Some(KdModule {
                    kind,
                    token: if kind.uses_distill_token() {
                        Some(scope.trunc_normal("distill_token", &[1, 1, d_v])?)
                    } else {
                        None
                    },
                    adapter: if kind.is_feature() {
                        Some(Dense::new(scope.pp("adapter"), d_v, cfg.provider.d_s)?)
                    } else {
                        None
                    },
                    distill_head: if kind == KdBaseline::LdDistill {
                        Some(Dense::new(scope.pp("distill_head"), d_v, cfg.backbone.num_classes)?)
                    } else {
                        None
                    },
                })
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            joints,
            store,
            backbone,
            sim2d,
            sim3d,
            kd,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn sim2d_heads(&self) -> &[Sim2DHead] {
        &self.sim2d
    }

    pub fn sim3d_heads(&self) -> &[Sim3DHead] {
        &self.sim3d
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Rows before the first patch token during training.
    pub fn prefix_tokens(&self) -> usize {
        1 + self.kd.as_ref().map_or(0, |k| k.token.is_some() as usize)
    }

    fn tap_layers(&self) -> Vec<usize> {
        let mut taps: Vec<usize> = self
            .sim2d
            .iter()
            .map(Sim2DHead::layer)
            .chain(self.sim3d.iter().map(Sim3DHead::layer))
            .collect();
        taps.sort_unstable();
        taps.dedup();
        taps
    }

    /// Every loss for `batch` with its graph attached.
    pub fn losses(&self, batch: &Batch) -> Result<LossTensors> {
        let bcfg = &self.cfg.backbone;
        let extra: Vec<&Tensor> = self
            .kd
            .iter()
            .filter_map(|k| k.token.as_ref().map(Var::as_tensor))
            .collect();
        let out = self.backbone.forward_with_taps(&batch.patches, &self.tap_layers(), &extra)?;
        let l_v_cls = loss_cls(&out.logits, &batch.labels)?;
        let tap = |l: usize| -> Result<&TokenTensor> {
            out.taps.get(&l).ok_or_else(|| Error::Contract(format!("layer {l} was not tapped")))
        };

        let mut l_2d = None;
        for head in &self.sim2d {
            let maps = batch.maps.as_ref().ok_or_else(|| batch.missing("token-skeleton maps"))?;
            let pred = head.predict_token_map(tap(head.layer())?)?;
            l_2d = add_opt(l_2d, head.loss(&pred, maps, self.cfg.sim2d.reduction)?)?;
        }

        let (mut l_align, mut l_3d_cls) = (None, None);
        for head in &self.sim3d {
            let feats = batch.features.as_ref().ok_or_else(|| batch.missing("skeleton features"))?;
            for part in head.losses(tap(head.layer())?, feats, &batch.labels, bcfg.t_v(), bcfg.s_v())? {
                l_align = add_opt(l_align, part.align)?;
                if let Some(c) = part.cls {
                    l_3d_cls = add_opt(l_3d_cls, c)?;
                }
            }
        }

        let l_kd = match &self.kd {
            None => None,
            Some(kd) => Some(self.kd_loss(kd, &out.last, &out.logits, batch)?),
        };

        let w = &self.cfg.train.weights;
        let mut total = (&l_v_cls * w.cls)?;
        for (t, wt) in [(&l_2d, w.sim2d), (&l_align, w.sim3d), (&l_3d_cls, w.sim3d), (&l_kd, w.kd)] {
            if let Some(t) = t {
                total = (total + (t * wt)?)?;
            }
        }
        Ok(LossTensors {
            l_v_cls,
            l_2d,
            l_3d_align: l_align,
            l_3d_cls,
            l_kd,
            total,
            logits: out.logits,
        })
    }

    fn kd_loss(&self, kd: &KdModule, last: &TokenTensor, logits: &Tensor, batch: &Batch) -> Result<Tensor> {
        let token_row = if kd.kind.uses_distill_token() { 1 } else { 0 };
        if kd.kind.is_feature() {
            let feats = batch.features.as_ref().ok_or_else(|| batch.missing("skeleton features"))?;
            let (b, t, j, d) = feats.dims4()?;
            let target = feats.reshape((b, t * j, d))?.mean(1)?;
            let adapter = kd.adapter.as_ref().expect("feature distillation has an adapter");
            let pred = adapter.forward(&self.backbone.pooled_token(last, token_row)?)?;
            Ok((pred - target)?.sqr()?.mean_all()?)
        } else {
            let teacher = batch.teacher_logits.as_ref().ok_or_else(|| batch.missing("teacher logits"))?;
            let student = match &kd.distill_head {
                Some(head) => head.forward(&self.backbone.pooled_token(last, token_row)?)?,
                None => logits.clone(),
            };
            soft_cross_entropy(&student, teacher)
        }
    }

    /// Loss bundle of a distillation baseline for `batch` (no update).
    pub fn run_kd_baseline(&self, batch: &Batch) -> Result<LossBundle> {
        if self.kd.is_none() {
            return Err(Error::Config("no distillation baseline configured".into()));
        }
        self.losses(batch)?.bundle()
    }

    /// Inference logits through the backbone only, without extra tokens.
    pub fn backbone_logits(&self, patches: &Tensor) -> Result<Tensor> {
        self.backbone.logits(patches)
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.store.iter().map(|(_, p)| p.var.clone()).collect()
    }

    /// One optimiser step on the weighted total.
    pub fn train_step(&self, batch: &Batch, opt: &mut TrainOptimizer) -> Result<(LossBundle, Tensor)> {
        let losses = self.losses(batch)?;
        let bundle = losses.bundle()?;
        if !bundle.total.is_finite() {
            return Err(Error::Numeric(format!("total loss is {}", bundle.total)));
        }
        let grads = losses.total.backward()?;
        opt.step(&grads)?;
        Ok((bundle, losses.logits.detach()))
    }

    /// Copy holding only backbone parameters.
    pub fn strip(&self) -> Result<InferenceModel> {
        InferenceModel::from_tensors(&self.cfg.backbone, self.dtype(), &self.store.tensors(false)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT_TAG.into(),
            stripped: false,
            joints: self.joints,
            train_only: self.store.train_only_names(),
            config: self.cfg.clone(),
        };
        store::save_tensors(path, &self.store.tensors(true)?, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_checkpoint(path)?;
        if meta.stripped {
            return Err(Error::format(path, "checkpoint is stripped; it holds no training modules"));
        }
        let model = Self::new(&meta.config, meta.joints)?;
        model.store.load(&tensors, true)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    format: String,
    stripped: bool,
    joints: usize,
    train_only: Vec<String>,
    config: ExperimentConfig,
}

fn read_checkpoint(path: &Path) -> Result<(BTreeMap<String, Tensor>, CheckpointMeta)> {
    let (tensors, meta): (_, CheckpointMeta) = store::load_tensors(path)?;
    if meta.format != CHECKPOINT_FORMAT_TAG {
        return Err(Error::format(path, format!("unknown format {}", meta.format)));
    }
    Ok((tensors, meta))
}

/// Pose-free classifier: just the backbone.
pub struct InferenceModel {
    store: ParamStore,
    backbone: Backbone,
    experiment: Option<ExperimentConfig>,
}

impl InferenceModel {
    pub fn new(cfg: &BackboneConfig, dtype: DType, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(dtype, seed);
        let backbone = Backbone::new(store.root().pp("backbone"), cfg)?;
        Ok(Self {
            store,
            backbone,
            experiment: None,
        })
    }

    fn from_tensors(cfg: &BackboneConfig, dtype: DType, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let model = Self::new(cfg, dtype, 0)?;
        model.store.load(tensors, true)?;
        Ok(model)
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars(true)
    }

    pub fn logits(&self, clips: &[&VideoClip]) -> Result<Tensor> {
        let patches = crate::backbone::patch_batch(clips, self.backbone.config(), self.store.dtype())?;
        self.backbone.logits(&patches)
    }

    pub fn save(&self, path: &Path, experiment: &ExperimentConfig, joints: usize) -> Result<()> {
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT_TAG.into(),
            stripped: true,
            joints,
            train_only: Vec::new(),
            config: experiment.clone(),
        };
        store::save_tensors(path, &self.store.tensors(true)?, &meta)
    }

    /// Loads any checkpoint, dropping train-only parameters of a full one.
    pub fn load(path: &Path) -> Result<Self> {
        let (mut tensors, meta) = read_checkpoint(path)?;
        for name in &meta.train_only {
            tensors.remove(name);
        }
        let dtype = meta.config.train.precision.dtype();
        let mut model = Self::from_tensors(&meta.config.backbone, dtype, &tensors)?;
        model.experiment = Some(meta.config);
        Ok(model)
    }

    pub fn experiment(&self) -> Option<&ExperimentConfig> {
        self.experiment.as_ref()
    }
}

/// Weighted mean of the two softmax distributions, renormalised.
pub fn late_fuse(rgb_logits: &[f32], pose_logits: &[f32], fusion: &FusionConfig) -> Result<Vec<f64>> {
    if rgb_logits.len() != pose_logits.len() {
        return Err(Error::Contract(format!(
            "cannot fuse {} RGB classes with {} pose classes",
            rgb_logits.len(),
            pose_logits.len()
        )));
    }
    let (wr, wp) = (fusion.weight_rgb, fusion.weight_pose);
    if wr < 0.0 || wp < 0.0 || wr + wp <= 0.0 {
        return Err(Error::Config("fusion weights must be non-negative with a positive sum".into()));
    }
    let (a, b) = (softmax(rgb_logits), softmax(pose_logits));
    let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| wr * x + wp * y).collect();
    let sum: f64 = mixed.iter().sum();
    Ok(mixed.into_iter().map(|v| v / sum).collect())
}

pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Per-step record written to the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean: LossBundle,
    /// Accuracy of the logits seen during the epoch's updates.
    pub running_top1: f64,
}

/// Trains `model` on `data`; one JSON line per step goes to `log`.
pub fn fit(model: &PiVit, data: &[PreparedSample], mut log: Option<&mut dyn Write>) -> Result<Vec<EpochSummary>> {
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let t = &model.cfg.train;
    let steps_per_epoch = data.len().div_ceil(t.batch_size);
    let schedule = CosineSchedule {
        base_lr: t.lr,
        warmup_steps: t.warmup_epochs * steps_per_epoch,
        total_steps: t.epochs * steps_per_epoch,
    };
    let sgd = SgdConfig {
        lr: t.lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
    };
    let mut opt = TrainOptimizer::new(t.optimizer, model.trainable_vars(), sgd)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut summaries = Vec::with_capacity(t.epochs);
    let mut step = 0;
    for epoch in 0..t.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(model.cfg.seed, epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut sum = LossBundle::default();
        let (mut hits, mut seen) = (0usize, 0usize);
        for chunk in order.chunks(t.batch_size) {
            let items: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = Batch::collate(&items, &model.cfg.backbone, model.dtype())?;
            let lr = schedule.lr(step);
            opt.set_learning_rate(lr);
            let (bundle, logits) = model.train_step(&batch, &mut opt)?;
            let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            hits += pred.iter().zip(&batch.labels).filter(|(p, l)| **p as usize == **l).count();
            seen += batch.labels.len();
            let n = items.len() as f64;
            sum.l_v_cls += bundle.l_v_cls * n;
            sum.l_2d += bundle.l_2d * n;
            sum.l_3d_align += bundle.l_3d_align * n;
            sum.l_3d_cls += bundle.l_3d_cls * n;
            sum.l_kd += bundle.l_kd * n;
            sum.total += bundle.total * n;
            if let Some(w) = log.as_deref_mut() {
                let rec = StepRecord {
                    step,
                    epoch,
                    lr,
                    batch: items.len(),
                    losses: bundle,
                };
                serde_json::to_writer(&mut *w, &rec)?;
                writeln!(w).map_err(|e| Error::io(Path::new("<train log>"), e))?;
            }
            step += 1;
        }
        let n = data.len() as f64;
        summaries.push(EpochSummary {
            epoch,
            mean: LossBundle {
                l_v_cls: sum.l_v_cls / n,
                l_2d: sum.l_2d / n,
                l_3d_align: sum.l_3d_align / n,
                l_3d_cls: sum.l_3d_cls / n,
                l_kd: sum.l_kd / n,
                total: sum.total / n,
            },
            running_top1: hits as f64 / seen as f64,
        });
    }
    Ok(summaries)
}

/// Mean loss bundle over `data` without updating anything.
pub fn evaluate_losses(model: &PiVit, data: &[PreparedSample], batch_size: usize) -> Result<LossBundle> {
    let mut sum = LossBundle::default();
    for chunk in data.chunks(batch_size.max(1)) {
        let items: Vec<&PreparedSample> = chunk.iter().collect();
        let batch = Batch::collate(&items, &model.cfg.backbone, model.dtype())?;
        let b = model.losses(&batch)?.bundle()?;
        let n = items.len() as f64;
        sum.l_v_cls += b.l_v_cls * n;
        sum.l_2d += b.l_2d * n;
        sum.l_3d_align += b.l_3d_align * n;
        sum.l_3d_cls += b.l_3d_cls * n;
        sum.l_kd += b.l_kd * n;
        sum.total += b.total * n;
    }
    let n = data.len().max(1) as f64;
    Ok(LossBundle {
        l_v_cls: sum.l_v_cls / n,
        l_2d: sum.l_2d / n,
        l_3d_align: sum.l_3d_align / n,
        l_3d_cls: sum.l_3d_cls / n,
        l_kd: sum.l_kd / n,
        total: sum.total / n,
    })
}
