mod common;

use common::oracle::{self, MapCase};
use common::D_S;
use pivit_core::data::{JointRecord, Skeleton2DSequence, Skeleton3DSequence};
use pivit_core::sim3d::{add_feature_noise, channel_std, SkeletonFeatures};
use pivit_core::skelmap::{
    add_pixel_noise, build_pixel_map, make_variant, map_iou, pool_token_map, token_map, MapVariant,
};
use pivit_core::synth::{generate_synthetic, SyntheticSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pooled_map_matches_window_predicate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let case = MapCase::random(&mut rng);
        let pose = oracle::random_pose(&mut rng, &case, 0.7);
        let got = token_map(&pose, &case.backbone()).unwrap();
        assert_eq!(got.bits(), oracle::token_map(&pose, &case).as_slice(), "{case:?}");
    }
}

#[test]
fn popcount_counts_retained_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let case = MapCase {
        frames: 5,
        height: 40,
        width: 40,
        patch: 8,
        tau: 1,
        joints: 10,
    };
    let entries: Vec<_> = (0..50)
        .map(|i| JointRecord {
            t: i / 10,
            j: i % 10,
            pos: [rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)],
        })
        .collect();
    let pose = Skeleton2DSequence::new(case.frames, case.joints, entries).unwrap();
    assert_eq!(build_pixel_map(&pose, 5, 40, 40).unwrap().count_ones(), 50);

    let shifted = pose.map_positions(|e| [e.x() - 40.0, e.y()]).unwrap();
    assert_eq!(build_pixel_map(&shifted, 5, 40, 40).unwrap().count_ones(), 0);
}

#[test]
fn adding_an_entry_never_clears_a_bit() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let case = MapCase::random(&mut rng);
        let pose = oracle::random_pose(&mut rng, &case, 0.4);
        let before = token_map(&pose, &case.backbone()).unwrap();
        let free: Vec<(usize, usize)> = (0..case.frames)
            .flat_map(|t| (0..case.joints).map(move |j| (t, j)))
            .filter(|&(t, j)| pose.get(t, j).is_none())
            .collect();
        let Some(&(t, j)) = free.first() else { continue };
        let mut entries = pose.entries().to_vec();
        entries.push(JointRecord {
            t,
            j,
            pos: [rng.random_range(0.0..case.width as f64), rng.random_range(0.0..case.height as f64)],
        });
        let grown = Skeleton2DSequence::new(case.frames, case.joints, entries).unwrap();
        let after = token_map(&grown, &case.backbone()).unwrap();
        assert!(before.bits().iter().zip(after.bits()).all(|(b, a)| !b || *a));
        assert!(after.count_ones() >= before.count_ones());
    }
}

#[test]
fn relabelling_joints_permutes_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let case = MapCase::random(&mut rng);
        let pose = oracle::random_pose(&mut rng, &case, 0.7);
        // new joint i carries old joint perm[i]
        let mut perm: Vec<usize> = (0..case.joints).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let relabelled = Skeleton2DSequence::new(
            case.frames,
            case.joints,
            pose.entries().iter().map(|e| JointRecord { j: inverse[e.j], ..*e }).collect(),
        )
        .unwrap();
        let cfg = case.backbone();
        let expect = token_map(&pose, &cfg).unwrap().permute_channels(&perm).unwrap();
        assert_eq!(token_map(&relabelled, &cfg).unwrap(), expect);
    }
}

#[test]
fn flat_variant_is_any_over_joints() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let case = MapCase::random(&mut rng);
        let pose = oracle::random_pose(&mut rng, &case, 0.5);
        let full = token_map(&pose, &case.backbone()).unwrap();
        let flat = make_variant(&full, MapVariant::Flat, &pose, None).unwrap();
        assert_eq!(flat.channels(), 1);
        let any: Vec<bool> = full.bits().chunks(case.joints).map(|c| c.iter().any(|&b| b)).collect();
        assert_eq!(flat.bits(), any.as_slice());
    }
}

#[test]
fn depth_variant_keeps_bits_and_defines_depth_only_where_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let case = MapCase::random(&mut rng);
        let pose = oracle::random_pose(&mut rng, &case, 0.7);
        let pose3d = Skeleton3DSequence::new(
            case.frames,
            case.joints,
            pose.entries()
                .iter()
                .map(|e| JointRecord {
                    t: e.t,
                    j: e.j,
                    pos: [e.x(), e.y(), rng.random_range(0.5..4.0)],
                })
                .collect(),
        )
        .unwrap();
        let full = token_map(&pose, &case.backbone()).unwrap();
        let depth = make_variant(&full, MapVariant::Depth, &pose, Some(&pose3d)).unwrap();
        assert_eq!(depth.bits(), full.bits());
        for (d, &bit) in depth.depth_values().unwrap().iter().zip(full.bits()) {
            assert!(if bit { (0.5..4.0).contains(d) } else { *d == 0.0 });
        }
    }
}

#[test]
fn empty_pixel_map_pools_to_empty_map() {
    let case = MapCase {
        frames: 3,
        height: 13,
        width: 7,
        patch: 4,
        tau: 2,
        joints: 3,
    };
    let pose = Skeleton2DSequence::new(3, 3, vec![]).unwrap();
    let m = build_pixel_map(&pose, 3, 13, 7).unwrap();
    let y = pool_token_map(&m, &case.backbone()).unwrap();
    assert_eq!((y.t_v(), y.s_v(), y.channels()), (2, 8, 3));
    assert_eq!(y.count_ones(), 0);
}

fn desk_poses(seed: u64) -> Vec<Skeleton2DSequence> {
    let spec = SyntheticSpec {
        clips_per_class: 2,
        seed,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec)
        .unwrap()
        .into_iter()
        .map(|s| s.pose2d.unwrap())
        .collect()
}

#[test]
fn zero_noise_is_bit_exact() {
    let poses = desk_poses(1);
    for (i, p) in poses.iter().enumerate() {
        assert_eq!(&add_pixel_noise(p, 0.0, i as u64).unwrap(), p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let values: Vec<f32> = (0..4 * 5 * D_S).map(|_| rng.random_range(-2.0..2.0)).collect();
    let f = SkeletonFeatures::new(4, 5, D_S, values).unwrap();
    let sigma = channel_std(&[&f]).unwrap();
    let same = add_feature_noise(&f, 0.0, &sigma, 3).unwrap();
    let bits = |x: &SkeletonFeatures| x.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&same), bits(&f));
}

#[test]
fn noise_is_seeded_and_rejects_negative_levels() {
    let pose = &desk_poses(2)[0];
    assert_eq!(add_pixel_noise(pose, 40.0, 9).unwrap(), add_pixel_noise(pose, 40.0, 9).unwrap());
    assert_ne!(add_pixel_noise(pose, 40.0, 9).unwrap(), add_pixel_noise(pose, 40.0, 10).unwrap());
    assert!(add_pixel_noise(pose, -1.0, 9).is_err());
    let f = SkeletonFeatures::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
    assert!(add_feature_noise(&f, -0.5, &[1.0, 1.0], 0).is_err());
}

#[test]
fn map_iou_agrees_with_oracle_and_decays_with_noise() {
    let cfg = pivit_core::backbone::BackboneConfig::default();
    let levels = [0.0, 20.0, 40.0, 80.0];
    let mut curve = [0.0; 4];
    let mut count = 0usize;
    for seed in 0..50u64 {
        for (k, pose) in desk_poses(100 + seed).iter().enumerate() {
            let clean = token_map(pose, &cfg).unwrap();
            for (i, &level) in levels.iter().enumerate() {
                let noisy = token_map(&add_pixel_noise(pose, level, seed * 31 + k as u64).unwrap(), &cfg).unwrap();
                let v = map_iou(&clean, &noisy).unwrap();
                assert_eq!(v, oracle::iou(clean.bits(), noisy.bits()));
                curve[i] += v;
            }
            count += 1;
        }
    }
    for v in &mut curve {
        *v /= count as f64;
    }
    assert_eq!(curve[0], 1.0);
    for w in curve.windows(2) {
        assert!(w[1] <= w[0] + 0.02, "{curve:?}");
    }
}

proptest! {
    #[test]
    fn pooled_map_matches_window_predicate_prop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = MapCase::random(&mut rng);
        let fill = rng.random_range(0.0..1.0);
        let pose = oracle::random_pose(&mut rng, &case, fill);
        let got = token_map(&pose, &case.backbone()).unwrap();
        let want = oracle::token_map(&pose, &case);
        prop_assert_eq!(got.bits(), want.as_slice());
    }
}
