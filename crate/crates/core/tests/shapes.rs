mod common;

use candle_core::{DType, Device, Tensor};
use common::oracle;
use pivit_core::backbone::{loss_cls, BackboneConfig, TokenTensor};
use pivit_core::heads::{HeadKind, ProjectionHead, Reduction};
use pivit_core::nn::{scalar, ParamStore};
use pivit_core::sim2d::loss_2d;
use pivit_core::sim3d::{
    loss_align, pool_targets, pool_visual, reconcile_indices, reconcile_time, AlignLevel, Alignment, Sim3DConfig,
    Sim3DHead,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn tokens(rng: &mut impl Rng, b: usize, prefix: usize, n: usize, d: usize) -> TokenTensor {
    TokenTensor {
        tokens: random(rng, &[b, prefix + n, d]),
        layer: 1,
        prefix,
    }
}

#[test]
fn pooled_shapes_follow_alignment_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let (b, t_s, j, d_s) = (
            rng.random_range(1..4),
            rng.random_range(1..9),
            rng.random_range(1..7),
            rng.random_range(1..9),
        );
        let (t_v, s_v, d_v, prefix) = (
            rng.random_range(1..5),
            rng.random_range(1..10),
            2 * rng.random_range(1..5),
            rng.random_range(1..3),
        );
        let y = random(&mut rng, &[b, t_s, j, d_s]);
        let z = tokens(&mut rng, b, prefix, t_v * s_v, d_v);
        assert_eq!(pool_targets(&y, AlignLevel::Global).unwrap().dims(), [b, d_s]);
        assert_eq!(pool_targets(&y, AlignLevel::Local).unwrap().dims(), [b, t_s, d_s]);
        assert_eq!(pool_visual(&z, t_v, s_v, AlignLevel::Global).unwrap().dims(), [b, d_v]);
        assert_eq!(pool_visual(&z, t_v, s_v, AlignLevel::Local).unwrap().dims(), [b, t_v, d_v]);

        // the full module lines both sides up and yields one loss per level
        let cfg = Sim3DConfig {
            alignment: Alignment::GlobalLocal,
            head: HeadKind::ALL[rng.random_range(0..3)],
            ..Sim3DConfig::default()
        };
        let mut store = ParamStore::new(DType::F64, 3);
        let mut root = store.root();
        let head = Sim3DHead::new(root.pp("s"), &cfg, 1, d_v, d_s, 4).unwrap();
        let labels: Vec<usize> = (0..b).map(|i| i % 4).collect();
        let losses = head.losses(&z, &y, &labels, t_v, s_v).unwrap();
        assert_eq!(losses.len(), 2);
        for l in &losses {
            assert!(scalar(&l.align).unwrap() >= 0.0);
        }
    }
}

#[test]
fn reconcile_index_sets() {
    assert_eq!(reconcile_indices(8, 4), [0, 2, 4, 6]);
    assert_eq!(reconcile_indices(2, 4), [0, 1, 1, 1]);
    assert_eq!(reconcile_indices(4, 4), [0, 1, 2, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random(&mut rng, &[2, 8, 3]);
    let picked = reconcile_time(&y, 4).unwrap().to_vec3::<f64>().unwrap();
    let rows = y.to_vec3::<f64>().unwrap();
    for b in 0..2 {
        for (i, src) in [0, 2, 4, 6].into_iter().enumerate() {
            assert_eq!(picked[b][i], rows[b][src]);
        }
    }
    assert_eq!(reconcile_time(&y, 8).unwrap().to_vec3::<f64>().unwrap(), rows);
}

#[test]
fn local_pooling_is_per_frame_spatial_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (b, t_v, s_v, d) = (2, 3, 5, 4);
    let z = tokens(&mut rng, b, 1, t_v * s_v, d);
    let got = pool_visual(&z, t_v, s_v, AlignLevel::Local).unwrap().to_vec3::<f64>().unwrap();
    let raw = z.tokens.to_vec3::<f64>().unwrap();
    for bi in 0..b {
        for t in 0..t_v {
            for c in 0..d {
                let mut sum = 0.0;
                for s in 0..s_v {
                    sum += raw[bi][1 + t * s_v + s][c];
                }
                assert!((got[bi][t][c] - sum / s_v as f64).abs() <= 1e-12);
            }
        }
    }

    let y = random(&mut rng, &[b, 4, 3, d]);
    let got = pool_targets(&y, AlignLevel::Local).unwrap().to_vec3::<f64>().unwrap();
    let raw: Vec<Vec<Vec<Vec<f64>>>> = (0..b)
        .map(|bi| y.get(bi).unwrap().to_vec3::<f64>().unwrap())
        .collect();
    for bi in 0..b {
        for t in 0..4 {
            for c in 0..d {
                let mean = (0..3).map(|j| raw[bi][t][j][c]).sum::<f64>() / 3.0;
                assert!((got[bi][t][c] - mean).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn global_pooling_ignores_token_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t_v, s_v, d) = (2, 6, 4);
    let z = tokens(&mut rng, 1, 1, t_v * s_v, d);
    let mut order: Vec<u32> = (0..(1 + t_v * s_v) as u32).collect();
    order[1..].reverse();
    order[1..].rotate_left(5);
    let shuffled = TokenTensor {
        tokens: z.tokens.index_select(&Tensor::new(order.as_slice(), &Device::Cpu).unwrap(), 1).unwrap(),
        ..z.clone()
    };
    let a = pool_visual(&z, t_v, s_v, AlignLevel::Global).unwrap();
    let b = pool_visual(&shuffled, t_v, s_v, AlignLevel::Global).unwrap();
    let diff = scalar(&(a - b).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
    assert!(diff <= 1e-12);
}

#[test]
fn fc_projection_is_a_matrix_vector_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new(DType::F64, 8);
    let head = {
        let mut root = store.root();
        ProjectionHead::new(root.pp("p"), HeadKind::Fc, 6, 3).unwrap()
    };
    let x = random(&mut rng, &[4, 6]);
    let got = head.forward(&x).unwrap().to_vec2::<f64>().unwrap();
    let w = store.get("p.fc.weight").unwrap().var.to_vec2::<f64>().unwrap();
    let bias = store.get("p.fc.bias").unwrap().var.to_vec1::<f64>().unwrap();
    let rows = x.to_vec2::<f64>().unwrap();
    for (r, row) in rows.iter().enumerate() {
        for o in 0..3 {
            let want = bias[o] + (0..6).map(|i| row[i] * w[i][o]).sum::<f64>();
            assert!((got[r][o] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn local_alignment_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, t, d) = (3, 4, 5);
    let target = random(&mut rng, &[b, t, d]);
    let pred = random(&mut rng, &[b, t, d]);
    let (tv, pv) = (target.to_vec3::<f64>().unwrap(), pred.to_vec3::<f64>().unwrap());
    for (inner, scale) in [(Reduction::Mean, 1.0 / d as f64), (Reduction::Sum, 1.0)] {
        let got = scalar(&loss_align(&target, &pred, AlignLevel::Local, inner).unwrap()).unwrap();
        let mut sum = 0.0;
        for bi in 0..b {
            for ti in 0..t {
                for c in 0..d {
                    sum += (pv[bi][ti][c] - tv[bi][ti][c]).powi(2);
                }
            }
        }
        assert!((got - sum * scale / (b * t) as f64).abs() <= 1e-10);
    }
    let same = scalar(&loss_align(&target, &target, AlignLevel::Local, Reduction::Mean).unwrap()).unwrap();
    assert_eq!(same, 0.0);
}

#[test]
fn classification_loss_matches_log_sum_exp() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = (random(&mut rng, &[6, 5]) * 4.0).unwrap();
    let labels = [0, 4, 2, 2, 1, 3];
    let got = scalar(&loss_cls(&logits, &labels).unwrap()).unwrap();
    let rows = logits.to_vec2::<f64>().unwrap();
    let want = rows.iter().zip(labels).map(|(r, l)| oracle::cross_entropy(r, l)).sum::<f64>() / 6.0;
    assert!((got - want).abs() <= 1e-10);
}

#[test]
fn map_loss_matches_elementwise_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = (random(&mut rng, &[1, 12, 2]) * 3.0).unwrap().reshape((3, 4, 2)).unwrap();
    let bits: Vec<f64> = (0..24).map(|_| rng.random_range(0..2) as f64).collect();
    let target = Tensor::from_vec(bits.clone(), (3, 4, 2), &Device::Cpu).unwrap();
    let got = scalar(&loss_2d(&logits, &target, Reduction::Mean).unwrap()).unwrap();
    let x = logits.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let want = x.iter().zip(&bits).map(|(&a, &y)| oracle::bce(a, y)).sum::<f64>() / 24.0;
    assert!((got - want).abs() <= 1e-10);
}

proptest! {
    #[test]
    fn token_count_formula(frames in 1usize..20, height in 1usize..80, width in 1usize..80, tau in 1usize..4, patch in 1usize..17) {
        let cfg = BackboneConfig { frames, height, width, tau, patch, ..BackboneConfig::default() };
        let t_v = (frames + tau - 1) / tau;
        let s_v = ((height + patch - 1) / patch) * ((width + patch - 1) / patch);
        prop_assert_eq!((cfg.t_v(), cfg.s_v(), cfg.num_tokens()), (t_v, s_v, t_v * s_v + 1));
    }
}
