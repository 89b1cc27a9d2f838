use std::path::Path;

use gaussocc::aclf::{consistency_reweight, dual_cross_attention, gated_mix, AclfParams};
use gaussocc::ebfs::{cross_entropy_map, modulation_weights, to_distribution};
use gaussocc::engine::{synthetic_scenes, ModelConfig, Split};
use gaussocc::harness::{read_scene, write_scene};
use gaussocc::lifting::{
    chunk_aggregate, decode_camera, decode_volume, deformable_sample, encode_camera, encode_volume,
    ldfa_lift, point_cloud_to_volume, CameraFeatureMap, ChunkPlan, LdfaConfig, LdfaParams,
    LidarPoint, PinholeCamera, PlaneView, VolumeSpec,
};
use gaussocc::losses::{lovasz_softmax, miou};
use gaussocc::mamba::{
    gauss_mamba_refine, inverse_permutation, morton_key, order_3d_to_1d, Bounds, MambaConfig,
    MambaParams, OrderingCurve,
};
use gaussocc::numerics::{attention_forward, cosine_similarity, softmax, COSINE_EPS};
use gaussocc::scene::io::{decode_grid, encode_grid, read_gaussians, write_gaussians};
use gaussocc::scene::{
    evaluate_gaussian, rotation_matrix, splat, Gaussian, GaussianSet, GridSpec, VoxelGrid,
};
use gaussocc::{Mode, Real, Rng, Tensor};
use proptest::prelude::*;

fn max_abs_diff(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, Real::max)
}

fn random_set(n: usize, classes: usize, feat: usize, rng: &mut Rng) -> GaussianSet {
    let mut set = GaussianSet::zeros(n, classes, feat);
    for i in 0..n {
        for a in 0..3 {
            set.means.row_mut(i)[a] = rng.range(0.2, 3.8);
            set.log_scales.row_mut(i)[a] = rng.range(-1.5, 0.0);
        }
        for a in 0..4 {
            set.rotations.row_mut(i)[a] = rng.normal();
        }
        set.opacity_logits.data_mut()[i] = rng.normal();
        for c in 0..classes {
            set.logits.row_mut(i)[c] = rng.normal();
        }
        for f in 0..feat {
            set.features.row_mut(i)[f] = rng.normal();
        }
    }
    set.normalize_rotations();
    set
}

fn grid() -> GridSpec {
    GridSpec::new([0.0; 3], 0.5, [8, 8, 8]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_ignores_constant_shifts(seed in any::<u64>(), shift in -50.0..50.0f64) {
        let mut rng = Rng::new(seed);
        let x = Tensor::random_normal(&[4, 6], 3.0, &mut rng);
        let a = softmax(&x, 1, 1.0).unwrap();
        let b = softmax(&x.map(|v| v + shift), 1, 1.0).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = Tensor::random_normal(&[5, 4], 2.0, &mut rng);
        let k = Tensor::random_normal(&[7, 4], 2.0, &mut rng);
        let v = Tensor::random_normal(&[7, 3], 1.0, &mut rng);
        let (_, w) = attention_forward(&q, &k, &v).unwrap();
        for i in 0..5 {
            prop_assert!((w.row(i).iter().sum::<Real>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_of_positive_multiple_is_one(seed in any::<u64>(), lambda in 1e-3..1e3f64) {
        let mut rng = Rng::new(seed);
        let a = Tensor::random_normal(&[3, 5], 1.0, &mut rng);
        let c = cosine_similarity(&a, &a.map(|v| lambda * v), COSINE_EPS).unwrap();
        prop_assert!(c.iter().all(|c| (c - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn splat_is_additive_over_partitions(seed in any::<u64>(), n in 2usize..12, cut in 1usize..11) {
        let mut rng = Rng::new(seed);
        let set = random_set(n, 3, 0, &mut rng);
        let cut = cut.min(n - 1);
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..n).collect();
        let spec = grid();
        let whole = splat(&set, &spec, 3.0);
        let a = splat(&set.permuted(&head), &spec, 3.0);
        let b = splat(&set.permuted(&tail), &spec, 3.0);
        let sum: Vec<Real> = a.logits_tensor().data().iter().zip(b.logits_tensor().data()).map(|(x, y)| x + y).collect();
        prop_assert!(max_abs_diff(whole.logits_tensor().data(), &sum) <= 1e-12);
    }

    #[test]
    fn finite_cutoff_never_exceeds_infinite(seed in any::<u64>(), k in 0.5..4.0f64) {
        let mut rng = Rng::new(seed);
        let mut set = random_set(6, 3, 0, &mut rng);
        set.logits = set.logits.map(Real::abs);
        let spec = grid();
        let cut = splat(&set, &spec, k);
        let full = splat(&set, &spec, Real::INFINITY);
        for (c, f) in cut.logits_tensor().data().iter().zip(full.logits_tensor().data()) {
            prop_assert!(c.abs() <= f.abs());
        }
    }

    #[test]
    fn gaussian_evaluation_is_rotation_invariant(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let q = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let spin = [rng.normal(), rng.normal(), rng.normal(), rng.normal()];
        let g = Gaussian::new(
            [rng.normal(), rng.normal(), rng.normal()],
            q,
            [rng.range(0.2, 2.0), rng.range(0.2, 2.0), rng.range(0.2, 2.0)],
            rng.range(0.0, 1.0),
            vec![rng.normal(), rng.normal()],
            vec![],
        ).unwrap();
        let x = [rng.normal(), rng.normal(), rng.normal()];
        let r = rotation_matrix(gaussocc::scene::normalize_quat(spin));
        let rot = |p: [Real; 3]| -> [Real; 3] {
            [0, 1, 2].map(|i| (0..3).map(|j| r[i][j] * p[j]).sum())
        };
        let n = (spin.iter().map(|v| v * v).sum::<Real>()).sqrt();
        let s = spin.map(|v| v / n);
        let q = g.rotation();
        let composed = [
            s[0] * q[0] - s[1] * q[1] - s[2] * q[2] - s[3] * q[3],
            s[0] * q[1] + s[1] * q[0] + s[2] * q[3] - s[3] * q[2],
            s[0] * q[2] - s[1] * q[3] + s[2] * q[0] + s[3] * q[1],
            s[0] * q[3] + s[1] * q[2] - s[2] * q[1] + s[3] * q[0],
        ];
        let mut turned = g.clone();
        turned.mean = rot(g.mean);
        turned.set_rotation(composed);
        let a = evaluate_gaussian(x, &g);
        let b = evaluate_gaussian(rot(x), &turned);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
    }

    #[test]
    fn keypoint_order_does_not_matter(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let plane = Tensor::random_normal(&[3, 6, 7], 1.0, &mut rng);
        let view = PlaneView::dense(&plane).unwrap();
        let base = [rng.range(0.5, 5.5), rng.range(0.5, 4.5)];
        let offs: Vec<[Real; 2]> = (0..5).map(|_| [rng.normal(), rng.normal()]).collect();
        let w: Vec<Real> = (0..5).map(|_| rng.range(0.0, 1.0)).collect();
        let perm = rng.permutation(5);
        let offs2: Vec<[Real; 2]> = perm.iter().map(|&i| offs[i]).collect();
        let w2: Vec<Real> = perm.iter().map(|&i| w[i]).collect();
        let a = deformable_sample(&view, base, &offs, &w);
        let b = deformable_sample(&view, base, &offs2, &w2);
        prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
    }

    #[test]
    fn chunk_plans_partition_planes(seed in any::<u64>(), d in 1usize..24, k in 1usize..24) {
        let k = k.min(d);
        let mut rng = Rng::new(seed);
        for mode in [Mode::Train, Mode::Eval] {
            let plan = ChunkPlan::for_mode(d, k, mode, &mut rng).unwrap();
            prop_assert_eq!(plan.chunks.len(), k);
            let mut all: Vec<usize> = plan.chunks.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..d).collect::<Vec<_>>());
            let sizes: Vec<usize> = plan.chunks.iter().map(Vec::len).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn equal_planes_make_chunking_irrelevant(seed in any::<u64>(), d in 2usize..12) {
        let mut rng = Rng::new(seed);
        let row: Vec<Real> = (0..4).map(|_| rng.normal()).collect();
        let rows: Vec<Vec<Real>> = (0..d).map(|_| row.clone()).collect();
        let depth = Tensor::from_rows(&rows).unwrap();
        let k = 1 + rng.below(d);
        let id = chunk_aggregate(&depth, &ChunkPlan::for_mode(d, k, Mode::Eval, &mut rng).unwrap()).unwrap();
        let shuffled = chunk_aggregate(&depth, &ChunkPlan::for_mode(d, k, Mode::Train, &mut rng).unwrap()).unwrap();
        prop_assert_eq!(id, shuffled);
    }

    #[test]
    fn smoothing_weights_are_normalized_and_symmetric(seed in any::<u64>(), xi in 0.0..0.1f64) {
        let mut rng = Rng::new(seed);
        let fc = to_distribution(&Tensor::random_normal(&[6, 5], 2.0, &mut rng), 1.0).unwrap();
        let fl = to_distribution(&Tensor::random_normal(&[6, 5], 2.0, &mut rng), 1.0).unwrap();
        let h_cl = cross_entropy_map(&fc, &fl, xi).unwrap();
        let h_lc = cross_entropy_map(&fl, &fc, xi).unwrap();
        let (wc, wl) = modulation_weights(&h_cl, &h_lc, xi);
        for i in 0..6 {
            let sum = (-h_cl[i]).exp() + (-h_lc[i]).exp() + xi;
            prop_assert!((wc[i] + wl[i] + xi / sum - 1.0).abs() <= 1e-12);
        }
        let (wl2, wc2) = modulation_weights(&h_lc, &h_cl, xi);
        prop_assert_eq!((wc, wl), (wc2, wl2));
    }

    #[test]
    fn fusion_gates_are_bounded_and_mixing_is_convex(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = AclfParams::new(4, 3, 2, &mut rng).unwrap();
        let fl = Tensor::random_normal(&[6, 4], 3.0, &mut rng);
        let fc = Tensor::random_normal(&[6, 4], 3.0, &mut rng);
        let (hl, hc) = dual_cross_attention(&fl, &fc, &p).unwrap();
        let (mixed, mask) = gated_mix(&hl, &hc, &p).unwrap();
        let (_, gate) = consistency_reweight(&mixed, &fc, &fl, &p).unwrap();
        prop_assert!(mask.data().iter().chain(gate.data()).all(|v| (0.0..=1.0).contains(v)));
        for i in 0..mixed.len() {
            let (a, b) = (hl.data()[i], hc.data()[i]);
            prop_assert!(mixed.data()[i] >= a.min(b) && mixed.data()[i] <= a.max(b));
        }
    }

    #[test]
    fn fusion_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = AclfParams::new(4, 3, 1, &mut rng).unwrap();
        let fl = Tensor::random_normal(&[7, 4], 1.0, &mut rng);
        let fc = Tensor::random_normal(&[7, 4], 1.0, &mut rng);
        let perm = rng.permutation(7);
        let a = gaussocc::aclf::fuse(&fc, &fl, &p).unwrap().gather_rows(&perm);
        let b = gaussocc::aclf::fuse(&fc.gather_rows(&perm), &fl.gather_rows(&perm), &p).unwrap();
        prop_assert!(max_abs_diff(a.data(), b.data()) <= 1e-12);
    }

    #[test]
    fn ordering_is_a_bijection(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = Rng::new(seed);
        let means = Tensor::random_uniform(&[n, 3], -1.0, 5.0, &mut rng);
        let curve = OrderingCurve::new(Bounds::new([0.0; 3], [4.0; 3]).unwrap(), 3).unwrap();
        let order = order_3d_to_1d(&means, &curve);
        let mut seen = order.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let inv = inverse_permutation(&order);
        prop_assert!((0..n).all(|i| order[inv[i]] == i && inv[order[i]] == i));
        let keys: Vec<u64> = order.iter().map(|&i| {
            let r = means.row(i);
            curve.key([r[0], r[1], r[2]])
        }).collect();
        prop_assert!(keys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn morton_keys_interleave_bits(x in 0u32..64, y in 0u32..64, z in 0u32..64) {
        let key = morton_key([x, y, z], 6);
        for b in 0..6 {
            prop_assert_eq!((key >> (3 * b)) & 1, ((x >> b) & 1) as u64);
            prop_assert_eq!((key >> (3 * b + 1)) & 1, ((y >> b) & 1) as u64);
            prop_assert_eq!((key >> (3 * b + 2)) & 1, ((z >> b) & 1) as u64);
        }
    }

    #[test]
    fn head_output_keeps_gaussian_invariants(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cfg = MambaConfig { blocks: 2, state_dim: 3, bits: 4, bands: 2 };
        let set = random_set(10, 3, 4, &mut rng);
        let mut p = MambaParams::new(4, 3, &cfg, &mut rng).unwrap();
        p.head.weight = Tensor::random_normal(p.head.weight.shape(), 1.0, &mut rng);
        let fused = Tensor::random_normal(&[10, 4], 1.0, &mut rng);
        let out = gauss_mamba_refine(&set, &fused, &Bounds::new([0.0; 3], [4.0; 3]).unwrap(), &p).unwrap();
        prop_assert!(out.check_invariants().is_ok());
        for i in 0..10 {
            let q = out.rotation(i);
            prop_assert!((q.iter().map(|v| v * v).sum::<Real>().sqrt() - 1.0).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&out.opacity(i)));
        }
    }

    #[test]
    fn lovasz_loss_lies_in_unit_interval(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = Rng::new(seed);
        let logits: Vec<Real> = (0..n * 4).map(|_| 3.0 * rng.normal()).collect();
        let gt: Vec<u16> = (0..n).map(|_| rng.below(4) as u16).collect();
        let l = lovasz_softmax(&logits, 4, &gt).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
    }

    #[test]
    fn miou_ignores_voxel_order_and_is_one_on_itself(seed in any::<u64>(), n in 1usize..60) {
        let mut rng = Rng::new(seed);
        let pred: Vec<u16> = (0..n).map(|_| rng.below(4) as u16).collect();
        let gt: Vec<u16> = (0..n).map(|_| rng.below(4) as u16).collect();
        let classes = [0u16, 1, 2, 3];
        let perm = rng.permutation(n);
        let pp: Vec<u16> = perm.iter().map(|&i| pred[i]).collect();
        let gp: Vec<u16> = perm.iter().map(|&i| gt[i]).collect();
        prop_assert_eq!(miou(&pred, &gt, &classes).unwrap(), miou(&pp, &gp, &classes).unwrap());
        prop_assert_eq!(miou(&pred, &pred, &classes).unwrap(), 1.0);
    }

    #[test]
    fn grids_round_trip_byte_identically(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let set = random_set(5, 3, 0, &mut rng);
        let g: VoxelGrid = splat(&set, &grid(), 3.0).with_labels();
        let bytes = encode_grid(&g);
        let back = decode_grid(&bytes, Path::new("memory")).unwrap();
        prop_assert_eq!(encode_grid(&back), bytes);
    }

    #[test]
    fn volumes_and_cameras_round_trip_byte_identically(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let points: Vec<LidarPoint> = (0..50)
            .map(|_| LidarPoint { position: [rng.range(0.0, 4.0), rng.range(0.0, 4.0), rng.range(0.0, 2.0)], intensity: rng.range(0.0, 1.0) })
            .collect();
        let vol = point_cloud_to_volume(&points, VolumeSpec::new([0.0; 3], 0.5, [4, 8, 8]).unwrap());
        let bytes = encode_volume(&vol);
        prop_assert_eq!(encode_volume(&decode_volume(&bytes, Path::new("memory")).unwrap()), bytes);
        let cam = PinholeCamera::look_at([0.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0], 4.0, 4.0, 3.0, 2.0).unwrap();
        let map = CameraFeatureMap::new(cam, Tensor::random_normal(&[2, 5, 7], 1.0, &mut rng)).unwrap();
        let bytes = encode_camera(&map);
        prop_assert_eq!(encode_camera(&decode_camera(&bytes, Path::new("memory")).unwrap()), bytes);
    }
}

#[test]
fn ldfa_lift_is_deterministic_in_eval_mode() {
    let mut rng = Rng::new(3);
    let points: Vec<LidarPoint> = (0..300)
        .map(|_| LidarPoint {
            position: [
                rng.range(0.0, 4.0),
                rng.range(0.0, 4.0),
                rng.range(0.0, 2.0),
            ],
            intensity: rng.range(0.0, 1.0),
        })
        .collect();
    let vol = point_cloud_to_volume(&points, VolumeSpec::new([0.0; 3], 0.5, [4, 8, 8]).unwrap());
    let set = random_set(12, 3, 6, &mut rng);
    let cfg = LdfaConfig::default();
    let params = LdfaParams::new(6, vol.channels(), 4, &cfg, &mut rng);
    let lift = |rng: &mut Rng| {
        let plan = ChunkPlan::for_mode(4, cfg.chunks, Mode::Eval, rng).unwrap();
        ldfa_lift(&set, &vol, &plan, &params).unwrap()
    };
    let a = lift(&mut Rng::new(10));
    let b = lift(&mut Rng::new(20));
    assert_eq!(a, b);
}

#[test]
fn shuffled_chunk_means_average_to_the_identity_value() {
    let mut rng = Rng::new(4);
    let (d, k, c) = (8, 4, 3);
    let depth = Tensor::random_normal(&[d, c], 1.0, &mut rng);
    let identity = chunk_aggregate(
        &depth,
        &ChunkPlan::for_mode(d, k, Mode::Eval, &mut rng).unwrap(),
    )
    .unwrap();
    let draws: Vec<Tensor> = (0..1000)
        .map(|_| {
            chunk_aggregate(
                &depth,
                &ChunkPlan::for_mode(d, k, Mode::Train, &mut rng).unwrap(),
            )
            .unwrap()
        })
        .collect();
    for idx in 0..identity.len() {
        let vals: Vec<Real> = draws.iter().map(|t| t.data()[idx]).collect();
        let mean = vals.iter().sum::<Real>() / vals.len() as Real;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<Real>() / (vals.len() - 1) as Real;
        let se = (var / vals.len() as Real).sqrt();
        let col = idx % c;
        let col_mean: Real = (0..d).map(|r| depth.get(&[r, col])).sum::<Real>() / d as Real;
        assert!(
            (mean - col_mean).abs() <= 3.0 * se,
            "entry {idx}: {mean} vs {col_mean} (se {se})"
        );
    }
}

#[test]
fn scenes_round_trip_through_files() {
    let cfg = ModelConfig::small();
    let scene = &synthetic_scenes(&cfg, Split::Eval).unwrap()[0];
    let dir = tempfile::tempdir().unwrap();
    write_scene(dir.path(), scene).unwrap();
    let back = read_scene(dir.path()).unwrap();
    let again = tempfile::tempdir().unwrap();
    write_scene(again.path(), &back).unwrap();
    for name in std::fs::read_dir(dir.path()).unwrap() {
        let name = name.unwrap().file_name();
        assert_eq!(
            std::fs::read(dir.path().join(&name)).unwrap(),
            std::fs::read(again.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
}

#[test]
fn gaussian_files_round_trip() {
    let mut rng = Rng::new(5);
    let set = random_set(7, 4, 3, &mut rng);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.gs");
    write_gaussians(&path, &set).unwrap();
    let back = read_gaussians(&path).unwrap();
    let first = std::fs::read(&path).unwrap();
    write_gaussians(&path, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), first);
}
