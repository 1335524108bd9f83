//! Frozen skeleton feature providers and the in-repo reference model.
//!
//! The reference provider is a per-joint temporal convolution stack: each
//! joint's centred position and velocity pass through two width-3 temporal
//! convolutions, giving `T x J x d_s` features. A linear probe on the
//! `(t, j)`-mean is trained with it and kept for distillation and fusion.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::loss_cls;
use crate::data::{LabeledSample, Skeleton3DSequence};
use crate::error::{Error, Result};
use crate::nn::{gelu, scalar, Dense, ParamStore};
use crate::sim3d::SkeletonFeatures;
use crate::store;

pub const PROVIDER_FORMAT_TAG: &str = "pivit-provider/1";
pub const FEATURE_CACHE_FORMAT_TAG: &str = "pivit-features/1";
pub const FEATURE_CACHE_MAGIC: &[u8; 8] = b"PIVITFEA";
pub const REFERENCE_PROVIDER_NAME: &str = "reference-tconv";
/// Held-out probe accuracy a provider must reach to be used as a teacher.
pub const PROVIDER_ACCURACY_GATE: f64 = 0.9;

const INPUT_CHANNELS: usize = 6;
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderDescriptor {
    pub name: String,
    pub d_s: usize,
    /// How output length relates to input length.
    pub temporal_policy: String,
}

pub trait SkeletonFeatureProvider: Send + Sync {
    fn descriptor(&self) -> ProviderDescriptor;

    fn produce(&self, pose: &Skeleton3DSequence) -> Result<SkeletonFeatures>;

    /// Class logits from the provider's own probe.
    fn probe_logits(&self, pose: &Skeleton3DSequence) -> Result<Vec<f32>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub hidden: usize,
    pub d_s: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            d_s: 32,
            steps: 300,
            lr: 1e-2,
            weight_decay: 1e-4,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderReport {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
    pub steps: usize,
}

impl ProviderReport {
    pub fn passes_gate(&self) -> bool {
        self.heldout_accuracy >= PROVIDER_ACCURACY_GATE
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProviderMeta {
    format: String,
    name: String,
    joints: usize,
    num_classes: usize,
    hidden: usize,
    d_s: usize,
    report: Option<ProviderReport>,
}

#[derive(Debug, Clone)]
struct Weights {
    conv1_w: Tensor,
    conv1_b: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    probe_w: Tensor,
    probe_b: Tensor,
}

impl Weights {
    fn from_dense(conv1: &Dense, conv2: &Dense, probe: &Dense) -> Self {
        Self {
            conv1_w: conv1.weight.as_tensor().clone(),
            conv1_b: conv1.bias.as_tensor().clone(),
            conv2_w: conv2.weight.as_tensor().clone(),
            conv2_b: conv2.bias.as_tensor().clone(),
            probe_w: probe.weight.as_tensor().clone(),
            probe_b: probe.bias.as_tensor().clone(),
        }
    }

    fn detached(&self) -> Result<Self> {
        let d = |t: &Tensor| -> Result<Tensor> { Ok(t.detach().copy()?) };
        Ok(Self {
            conv1_w: d(&self.conv1_w)?,
            conv1_b: d(&self.conv1_b)?,
            conv2_w: d(&self.conv2_w)?,
            conv2_b: d(&self.conv2_b)?,
            probe_w: d(&self.probe_w)?,
            probe_b: d(&self.probe_b)?,
        })
    }

    fn named(&self) -> BTreeMap<String, Tensor> {
        [
            ("conv1.weight", &self.conv1_w),
            ("conv1.bias", &self.conv1_b),
            ("conv2.weight", &self.conv2_w),
            ("conv2.bias", &self.conv2_b),
            ("probe.weight", &self.probe_w),
            ("probe.bias", &self.probe_b),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
    }

    fn from_named(mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |k: &str| {
            map.remove(k)
                .ok_or_else(|| Error::Contract(format!("provider weights lack {k}")))?
                .to_dtype(DType::F32)
                .map_err(Error::from)
        };
        Ok(Self {
            conv1_w: take("conv1.weight")?,
            conv1_b: take("conv1.bias")?,
            conv2_w: take("conv2.weight")?,
            conv2_b: take("conv2.bias")?,
            probe_w: take("probe.weight")?,
            probe_b: take("probe.bias")?,
        })
    }
}

/// Concatenates each frame with its neighbours (zero padded): `(B, T, J, C) -> (B, T, J, 3C)`.
fn temporal_window(x: &Tensor) -> Result<Tensor> {
    let (b, t, j, c) = x.dims4()?;
    let pad = Tensor::zeros((b, 1, j, c), x.dtype(), x.device())?;
    let padded = Tensor::cat(&[&pad, x, &pad], 1)?;
    let shifted = (0..KERNEL).map(|k| padded.narrow(1, k, t)).collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&shifted, 3)?.contiguous()?)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(w)?.broadcast_add(b)?)
}

fn encode(w: &Weights, x: &Tensor) -> Result<Tensor> {
    let h = gelu(&affine(&temporal_window(x)?, &w.conv1_w, &w.conv1_b)?)?;
    affine(&temporal_window(&h)?, &w.conv2_w, &w.conv2_b)
}

fn probe(w: &Weights, features: &Tensor) -> Result<Tensor> {
    let (b, t, j, d) = features.dims4()?;
    affine(&features.reshape((b, t * j, d))?.mean(1)?, &w.probe_w, &w.probe_b)
}

/// Per-frame centred positions and frame-to-frame velocities, `T x J x 6`.
/// Missing joints are zero-filled.
pub fn provider_inputs(pose: &Skeleton3DSequence) -> Vec<f32> {
    let (t_n, j_n) = (pose.num_frames(), pose.num_joints());
    let pos = |t: usize, j: usize| pose.get(t, j).map(|e| e.pos);
    let mut out = vec![0f32; t_n * j_n * INPUT_CHANNELS];
    for t in 0..t_n {
        let present: Vec<[f64; 3]> = (0..j_n).filter_map(|j| pos(t, j)).collect();
        let mut centre = [0.0; 3];
        for p in &present {
            (0..3).for_each(|k| centre[k] += p[k] / present.len() as f64);
        }
        for j in 0..j_n {
            let Some(p) = pos(t, j) else { continue };
            let prev = if t > 0 { pos(t - 1, j) } else { None };
            let row = &mut out[(t * j_n + j) * INPUT_CHANNELS..][..INPUT_CHANNELS];
            for k in 0..3 {
                row[k] = (p[k] - centre[k]) as f32;
                row[3 + k] = prev.map_or(0.0, |q| (p[k] - q[k]) as f32);
            }
        }
    }
    out
}

fn input_batch(poses: &[&Skeleton3DSequence]) -> Result<Tensor> {
    let first = poses.first().ok_or_else(|| Error::Contract("empty pose batch".into()))?;
    let (t, j) = (first.num_frames(), first.num_joints());
    if poses.iter().any(|p| (p.num_frames(), p.num_joints()) != (t, j)) {
        return Err(Error::Contract("poses in a batch differ in shape".into()));
    }
    let data: Vec<f32> = poses.iter().flat_map(|p| provider_inputs(p)).collect();
    Ok(Tensor::from_vec(data, (poses.len(), t, j, INPUT_CHANNELS), &Device::Cpu)?)
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| **p as usize == **l).count();
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Debug, Clone)]
pub struct ReferenceProvider {
    joints: usize,
    num_classes: usize,
    hidden: usize,
    d_s: usize,
    weights: Weights,
    report: Option<ProviderReport>,
}

fn poses_and_labels<'a>(samples: &[&'a LabeledSample]) -> Result<(Vec<&'a Skeleton3DSequence>, Vec<usize>)> {
    let poses = samples
        .iter()
        .map(|s| {
            s.pose3d.as_ref().ok_or_else(|| Error::Data {
                sample: s.clip.id.clone(),
                msg: "3D pose required for the skeleton provider".into(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((poses, samples.iter().map(|s| s.clip.label).collect()))
}

impl ReferenceProvider {
    /// Trains the encoder and probe full-batch with AdamW, then freezes them.
    pub fn pretrain(
        train: &[&LabeledSample],
        heldout: &[&LabeledSample],
        num_classes: usize,
        cfg: &ProviderConfig,
    ) -> Result<Self> {
        let (poses, labels) = poses_and_labels(train)?;
        let joints = poses[0].num_joints();
        let x = input_batch(&poses)?;
        let mut store = ParamStore::new(DType::F32, cfg.seed);
        let mut root = store.root();
        let conv1 = Dense::new(root.pp("conv1"), KERNEL * INPUT_CHANNELS, cfg.hidden)?;
        let conv2 = Dense::new(root.pp("conv2"), KERNEL * cfg.hidden, cfg.d_s)?;
        let head = Dense::new(root.pp("probe"), cfg.d_s, num_classes)?;
        let vars = store.iter().map(|(_, p)| p.var.clone()).collect();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..Default::default()
            },
        )?;
        let live = Weights::from_dense(&conv1, &conv2, &head);
        let mut final_loss = f64::NAN;
        for _ in 0..cfg.steps {
            let loss = loss_cls(&probe(&live, &encode(&live, &x)?)?, &labels)?;
            final_loss = scalar(&loss)?;
            opt.backward_step(&loss)?;
        }
        let mut provider = Self {
            joints,
            num_classes,
            hidden: cfg.hidden,
            d_s: cfg.d_s,
            weights: live.detached()?,
            report: None,
        };
        let train_accuracy = provider.probe_accuracy(train)?;
        let heldout_accuracy = provider.probe_accuracy(heldout)?;
        provider.report = Some(ProviderReport {
            train_accuracy,
            heldout_accuracy,
            final_loss,
            steps: cfg.steps,
        });
        Ok(provider)
    }

    pub fn report(&self) -> Option<&ProviderReport> {
        self.report.as_ref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probe_accuracy(&self, samples: &[&LabeledSample]) -> Result<f64> {
        let (poses, labels) = poses_and_labels(samples)?;
        let feats = encode(&self.weights, &input_batch(&poses)?)?;
        accuracy(&probe(&self.weights, &feats)?, &labels)
    }

    /// Features for many equally shaped poses in one pass.
    pub fn produce_batch(&self, poses: &[&Skeleton3DSequence]) -> Result<Vec<SkeletonFeatures>> {
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        self.check_joints(poses)?;
        let feats = encode(&self.weights, &input_batch(poses)?)?;
        let (_, t, j, d) = feats.dims4()?;
        (0..poses.len())
            .map(|i| SkeletonFeatures::new(t, j, d, feats.get(i)?.flatten_all()?.to_vec1::<f32>()?))
            .collect()
    }

    fn check_joints(&self, poses: &[&Skeleton3DSequence]) -> Result<()> {
        match poses.iter().find(|p| p.num_joints() != self.joints) {
            Some(p) => Err(Error::Contract(format!(
                "provider expects {} joints, pose has {}",
                self.joints,
                p.num_joints()
            ))),
            None => Ok(()),
        }
    }

    /// Hex SHA-256 over names, shapes and little-endian values of all weights.
    pub fn weights_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, t) in self.weights.named() {
            hasher.update(name.as_bytes());
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ProviderMeta {
            format: PROVIDER_FORMAT_TAG.into(),
            name: REFERENCE_PROVIDER_NAME.into(),
            joints: self.joints,
            num_classes: self.num_classes,
            hidden: self.hidden,
            d_s: self.d_s,
            report: self.report.clone(),
        };
        store::save_tensors(path, &self.weights.named(), &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta): (_, ProviderMeta) = store::load_tensors(path)?;
        if meta.format != PROVIDER_FORMAT_TAG {
            return Err(Error::format(path, format!("unknown format {}", meta.format)));
        }
        let weights = Weights::from_named(tensors)?;
        let expect = [
            (weights.conv1_w.dims(), [KERNEL * INPUT_CHANNELS, meta.hidden]),
            (weights.conv2_w.dims(), [KERNEL * meta.hidden, meta.d_s]),
            (weights.probe_w.dims(), [meta.d_s, meta.num_classes]),
        ];
        if expect.iter().any(|(got, want)| *got != want.as_slice()) {
            return Err(Error::format(path, "weight shapes disagree with metadata"));
        }
        Ok(Self {
            joints: meta.joints,
            num_classes: meta.num_classes,
            hidden: meta.hidden,
            d_s: meta.d_s,
            weights,
            report: meta.report,
        })
    }
}

impl SkeletonFeatureProvider for ReferenceProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: REFERENCE_PROVIDER_NAME.into(),
            d_s: self.d_s,
            temporal_policy: "preserve".into(),
        }
    }

    fn produce(&self, pose: &Skeleton3DSequence) -> Result<SkeletonFeatures> {
        Ok(self.produce_batch(&[pose])?.remove(0))
    }

    fn probe_logits(&self, pose: &Skeleton3DSequence) -> Result<Vec<f32>> {
        self.check_joints(&[pose])?;
        let feats = encode(&self.weights, &input_batch(&[pose])?)?;
        Ok(probe(&self.weights, &feats)?.squeeze(0)?.to_vec1::<f32>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCacheHeader {
    pub format: String,
    #[serde(rename = "T_s")]
    pub frames: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    pub d_s: usize,
    pub provider: String,
    pub weights_hash: String,
}

pub fn write_feature_cache(path: &Path, features: &SkeletonFeatures, provider: &str, weights_hash: &str) -> Result<()> {
    let header = FeatureCacheHeader {
        format: FEATURE_CACHE_FORMAT_TAG.into(),
        frames: features.frames,
        joints: features.joints,
        d_s: features.dim,
        provider: provider.into(),
        weights_hash: weights_hash.into(),
    };
    let payload: Vec<u8> = features.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    store::write_framed(path, FEATURE_CACHE_MAGIC, &header, &payload)
}

pub fn read_feature_cache(path: &Path) -> Result<(FeatureCacheHeader, SkeletonFeatures)> {
    let (header, payload): (FeatureCacheHeader, _) = store::read_framed(path, FEATURE_CACHE_MAGIC)?;
    if header.format != FEATURE_CACHE_FORMAT_TAG {
        return Err(Error::format(path, format!("unknown format {}", header.format)));
    }
    if payload.len() != 4 * header.frames * header.joints * header.d_s {
        return Err(Error::format(path, "payload length mismatch"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let feats = SkeletonFeatures::new(header.frames, header.joints, header.d_s, values)?;
    Ok((header, feats))
}
