use ccs::dataset::{generate_shape, GenConfig};
use ccs::geometry::{chamfer_distance, dist2, PointCloud, Pose, Quaternion, Vec3};
use ccs::metrics::{part_accuracy, rmse_translation, shape_cd};
use ccs::nn::{ops, Init, ParamStore, Rng, Tensor};
use ccs::workspace::{workspace_block, AssemblerStates, WorkspaceDims, WorkspaceParams, WorkspaceState};
use proptest::prelude::*;

fn cfg() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn point() -> impl Strategy<Value = Vec3> {
    [-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64]
}

fn cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(point(), 1..max).prop_map(|p| PointCloud::new(p).unwrap())
}

fn quat() -> impl Strategy<Value = Quaternion> {
    any::<u64>().prop_map(|s| Quaternion::random(&mut Rng::new(s)))
}

fn pose() -> impl Strategy<Value = Pose> {
    (quat(), point()).prop_map(|(q, t)| Pose::new(q, t))
}

fn matrix(max_r: usize, max_c: usize) -> impl Strategy<Value = Tensor> {
    (1..max_r, 1..max_c).prop_flat_map(|(r, c)| {
        prop::collection::vec(-20.0..20.0f64, r * c).prop_map(move |d| Tensor::new(d, &[r, c]).unwrap())
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(cfg())]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 9)) {
        let (_, c) = x.dims2().unwrap();
        let s = ops::softmax(&x, 1).unwrap();
        for row in s.data().chunks_exact(c) {
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_keeps_at_most_k_and_the_max(x in matrix(6, 9), k in 1usize..5) {
        let (_, c) = x.dims2().unwrap();
        let s = ops::top_k_softmax(&x, k, 1).unwrap();
        for (row, logits) in s.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
            prop_assert!(row.iter().filter(|v| **v != 0.0).count() <= k);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = (0..c).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
            prop_assert!(row[argmax] > 0.0);
        }
    }

    #[test]
    fn top_k_with_k_at_least_width_is_softmax(x in matrix(5, 6)) {
        let (_, c) = x.dims2().unwrap();
        let a = ops::top_k_softmax(&x, c, 1).unwrap();
        let b = ops::softmax(&x, 1).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            prop_assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn chamfer_is_symmetric(a in cloud(24), b in cloud(24)) {
        let ab = chamfer_distance(&a, &b).unwrap();
        let ba = chamfer_distance(&b, &a).unwrap();
        prop_assert!(close(ab, ba, 1e-12));
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_is_rigid_invariant(a in cloud(24), b in cloud(24), p in pose()) {
        let before = chamfer_distance(&a, &b).unwrap();
        let after = chamfer_distance(&p.apply(&a), &p.apply(&b)).unwrap();
        prop_assert!(close(before, after, 1e-9), "{before} vs {after}");
    }

    #[test]
    fn poses_preserve_distances(c in cloud(12), p in pose()) {
        let moved = p.apply(&c);
        let (x, y) = (c.points(), moved.points());
        for i in 0..x.len() {
            for j in 0..i {
                prop_assert!(close(dist2(x[i], x[j]).sqrt(), dist2(y[i], y[j]).sqrt(), 1e-9));
            }
        }
    }

    #[test]
    fn pose_inverse_and_composition(p in pose(), q in pose(), v in point()) {
        let back = p.inverse().apply_point(p.apply_point(v));
        for k in 0..3 {
            prop_assert!(close(back[k], v[k], 1e-9));
        }
        let two = q.apply_point(p.apply_point(v));
        let one = p.then(&q).apply_point(v);
        for k in 0..3 {
            prop_assert!(close(one[k], two[k], 1e-9));
        }
    }

    #[test]
    fn quaternion_product_is_associative(a in quat(), b in quat(), c in quat()) {
        let l = a.mul(b).mul(c).to_array();
        let r = a.mul(b.mul(c)).to_array();
        for k in 0..4 {
            prop_assert!((l[k] - r[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn quaternion_double_cover(q in quat(), v in point()) {
        let neg = Quaternion::new(-q.w, -q.x, -q.y, -q.z);
        let (a, b) = (q.rotate(v), neg.rotate(v));
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-12);
        }
        prop_assert!(q.angle_to_deg(neg) < 1e-4);
    }

    #[test]
    fn euler_round_trip(q in quat(), v in point()) {
        let back = Quaternion::from_euler_deg(q.to_euler_deg());
        let (a, b) = (q.rotate(v), back.rotate(v));
        for k in 0..3 {
            prop_assert!((a[k] - b[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn workspace_block_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..9, k in 1usize..4) {
        let dims = WorkspaceDims { slots: 3, slot_dim: 8, assembler_dim: 8, attn_dim: 8, heads: 2 };
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let p = WorkspaceParams::new(&mut Init::new(&mut store, &mut rng), dims).unwrap();
        let state = WorkspaceState(Tensor::new(rng.normals(24), &[3, 8]).unwrap());
        let rows: Vec<Vec<f64>> = (0..n).map(|_| rng.normals(8)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let a = AssemblerStates(Tensor::from_rows(&rows).unwrap());
        let pa = AssemblerStates(Tensor::from_rows(&perm.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>()).unwrap());
        let out = workspace_block(&a, &state, &p, k).unwrap();
        let pout = workspace_block(&pa, &state, &p, k).unwrap();
        for (x, y) in out.state.0.data().iter().zip(pout.state.0.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                prop_assert!((pout.assemblers.0.at(r, c) - out.assemblers.0.at(src, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn metrics_ignore_a_shared_rigid_motion_and_part_order(seed in 0u64..40, g in pose()) {
        let rec = generate_shape(&GenConfig { n_pc: 24, dense_points: 2048, cuts_min: 1, cuts_max: 3, ..GenConfig::default() }, seed).unwrap();
        let mut rng = Rng::new(seed);
        let pred: Vec<Pose> = rec.gt_poses.iter().map(|p| {
            let jiggle = Pose::new(Quaternion::random(&mut rng), [0.05 * rng.normal(), 0.0, 0.0]);
            if rng.uniform() < 0.5 { *p } else { jiggle.then(p) }
        }).collect();
        let scd = shape_cd(&pred, &rec.gt_poses, &rec.parts).unwrap();
        let moved_pred: Vec<Pose> = pred.iter().map(|p| p.then(&g)).collect();
        let moved_gt: Vec<Pose> = rec.gt_poses.iter().map(|p| p.then(&g)).collect();
        prop_assert!(close(scd, shape_cd(&moved_pred, &moved_gt, &rec.parts).unwrap(), 1e-9));

        let pa = part_accuracy(&pred, &rec.gt_poses, &rec.parts, 0.01).unwrap();
        let rev = |v: &[Pose]| v.iter().rev().copied().collect::<Vec<_>>();
        let parts_rev: Vec<PointCloud> = rec.parts.iter().rev().cloned().collect();
        prop_assert_eq!(pa, part_accuracy(&rev(&pred), &rev(&rec.gt_poses), &parts_rev, 0.01).unwrap());
        prop_assert_eq!(rmse_translation(&rec.gt_poses, &rec.gt_poses).unwrap(), 0.0);
    }

    #[test]
    fn generated_shapes_are_deterministic_and_canonical(seed in 0u64..200) {
        let cfg = GenConfig { n_pc: 32, dense_points: 2048, cuts_max: 5, ..GenConfig::default() };
        let a = generate_shape(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &generate_shape(&cfg, seed).unwrap());
        a.validate().unwrap();
        prop_assert!((2..=cfg.max_parts).contains(&a.n_parts()));
        for p in &a.parts {
            prop_assert_eq!(p.len(), 32);
            prop_assert!(p.centroid().iter().all(|c| c.abs() < 1e-9));
        }
    }
}
