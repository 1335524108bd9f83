#![allow(dead_code)]

pub mod oracle;

use candle_core::{Tensor, Var};
use pivit_core::backbone::BackboneConfig;
use pivit_core::data::{LabeledSample, Skeleton3DSequence};
use pivit_core::provider::{ProviderDescriptor, SkeletonFeatureProvider};
use pivit_core::sim3d::SkeletonFeatures;
use pivit_core::synth::{generate_synthetic, SyntheticSpec};
use pivit_core::trainer::{prepare, Batch, ExperimentConfig, PiVit, Precision};
use pivit_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const JOINTS: usize = 4;
pub const D_S: usize = 6;

/// 16x16 clips, two blocks of width 16, 64-bit; well under 5e4 parameters.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneConfig {
        frames: 4,
        height: 16,
        width: 16,
        tau: 2,
        patch: 8,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        ..BackboneConfig::default()
    };
    cfg.data.synthetic = SyntheticSpec {
        num_classes: 4,
        clips_per_class: 2,
        frames: 4,
        height: 16,
        width: 16,
        joints: JOINTS,
        seed: 3,
        motion_amplitude: 3.0,
        render_radius: 1.5,
    };
    cfg.provider.d_s = D_S;
    cfg.sim2d.layers = vec![1];
    cfg.train.precision = Precision::F64;
    cfg
}

pub fn tiny_samples(cfg: &ExperimentConfig) -> Vec<LabeledSample> {
    generate_synthetic(&cfg.data.synthetic).unwrap()
}

/// Deterministic stand-in for a frozen skeleton model: fixed random
/// features of the raw coordinates, and logits from their mean.
pub struct FixedProvider {
    pub d_s: usize,
    mix: Vec<[f32; 3]>,
    classes: usize,
}

impl FixedProvider {
    pub fn new(d_s: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mix = (0..d_s)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        Self { d_s, mix, classes }
    }
}

impl SkeletonFeatureProvider for FixedProvider {
    fn descriptor(&self) -> ProviderDescriptor {
        ProviderDescriptor {
            name: "fixed-test".into(),
            d_s: self.d_s,
            temporal_policy: "same".into(),
        }
    }

    fn produce(&self, pose: &Skeleton3DSequence) -> Result<SkeletonFeatures> {
        let (t_n, j_n) = (pose.num_frames(), pose.num_joints());
        let mut values = Vec::with_capacity(t_n * j_n * self.d_s);
        for t in 0..t_n {
            for j in 0..j_n {
                let p = pose.get(t, j).map_or([0.0; 3], |e| [e.x() as f32, e.y() as f32, e.z() as f32]);
                for m in &self.mix {
                    values.push((m[0] * p[0] + m[1] * p[1] + m[2] * p[2]).tanh());
                }
            }
        }
        SkeletonFeatures::new(t_n, j_n, self.d_s, values)
    }

    fn probe_logits(&self, pose: &Skeleton3DSequence) -> Result<Vec<f32>> {
        let f = self.produce(pose)?;
        let mean = f.global_mean();
        Ok((0..self.classes).map(|c| mean[c % mean.len()] as f32 * (c as f32 + 1.0)).collect())
    }
}

pub fn batch_for(cfg: &ExperimentConfig, samples: &[LabeledSample], provider: &dyn SkeletonFeatureProvider) -> (PiVit, Batch) {
    let prepared = prepare(samples, cfg, Some(provider)).unwrap();
    let model = PiVit::new(cfg, JOINTS).unwrap();
    let items: Vec<_> = prepared.iter().collect();
    let batch = Batch::collate(&items, &cfg.backbone, model.dtype()).unwrap();
    (model, batch)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Relative error with a floor on the denominator so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Checks `coords` random scalar coordinates drawn from the parameters that
/// receive a gradient from `loss`.
pub fn grad_check(
    params: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    coords: usize,
    eps: f64,
    seed: u64,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let live: Vec<(&String, &Var, Vec<f64>)> = params
        .iter()
        .filter_map(|(n, v)| {
            grads
                .get(v)
                .map(|g| (n, v, g.flatten_all().unwrap().to_vec1::<f64>().unwrap()))
        })
        .collect();
    assert!(!live.is_empty(), "no parameter receives a gradient");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    for _ in 0..coords {
        let (name, var, g) = &live[rng.random_range(0..live.len())];
        let i = rng.random_range(0..g.len());
        let original = var.as_tensor().copy().unwrap();
        let base = original.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eval_at = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, original.shape(), original.device()).unwrap())
                .unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        // fourth-order central stencil
        let near = eval_at(eps) - eval_at(-eps);
        let far = eval_at(2.0 * eps) - eval_at(-2.0 * eps);
        let numeric = (8.0 * near - far) / (12.0 * eps);
        var.set(&original).unwrap();
        let err = rel_err(g[i], numeric);
        if err >= worst.0 {
            worst = (err, format!("{name}[{i}]: analytic {:.6e}, numeric {:.6e}", g[i], numeric));
        }
    }
    GradCheck {
        checked: coords,
        max_rel_err: worst.0,
        worst: worst.1,
    }
}

pub fn named_vars(model: &PiVit) -> Vec<(String, Var)> {
    model.store().iter().map(|(n, p)| (n.to_string(), p.var.clone())).collect()
}
