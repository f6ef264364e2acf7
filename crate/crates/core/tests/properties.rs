mod common;

use common::*;
use posesynth::dataset::{generate_scene, SceneSpec};
use posesynth::geometry::{angular_error_deg, compose_absolute, project, relative_pose, unproject, Vec3};
use posesynth::synthesis::fuse_depth;
use posesynth::{PixelCoord, Quaternion};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn compose_inverts_relative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (q, nn) = (random_pose(&mut r, 50.0), random_pose(&mut r, 50.0));
        let back = compose_absolute(&nn, &relative_pose(&q, &nn));
        prop_assert!((back.center - q.center).norm() <= 1e-9);
        prop_assert!(angular_error_deg(&back.rotation, &q.rotation) <= 1e-7);
    }

    #[test]
    fn relative_of_self_is_identity(seed in any::<u64>()) {
        let p = random_pose(&mut rng(seed), 10.0);
        let rel = relative_pose(&p, &p);
        prop_assert!(angular_error_deg(&rel.rotation, &Quaternion::IDENTITY) < 1e-7);
        prop_assert!(rel.translation.norm() == 0.0);
    }

    #[test]
    fn unproject_then_project(seed in any::<u64>(), u in 0i64..64, v in 0i64..48, depth in 0.1f64..100.0) {
        let pose = random_pose(&mut rng(seed), 20.0);
        let k = posesynth::Intrinsics::new(55.0, 53.0, 31.7, 24.2, 64, 48).unwrap();
        let x = unproject(PixelCoord::new(u, v), depth, &k, &pose).unwrap();
        let (p, z) = project(&x, &k, &pose).visible().expect("point in view");
        prop_assert_eq!(p, PixelCoord::new(u, v));
        prop_assert!((z - depth).abs() <= 1e-9 * depth);
    }

    #[test]
    fn quaternion_matrix_conversions(seed in any::<u64>()) {
        let q = random_quaternion(&mut rng(seed));
        let m = q.to_matrix();
        prop_assert!((m - rot(&q)).abs().max() < 1e-12);
        let back = Quaternion::from_matrix(&m).unwrap();
        prop_assert!(angular_error_deg(&back, &q) < 1e-7);
        prop_assert!((back.norm() - 1.0).abs() < 1e-12);
        prop_assert!(back.w >= 0.0);
    }

    #[test]
    fn rotate_matches_matrix(seed in any::<u64>(), x in -5.0f64..5.0, y in -5.0f64..5.0, z in -5.0f64..5.0) {
        let q = random_quaternion(&mut rng(seed));
        let v = Vec3::new(x, y, z);
        let a = q.rotate(&v);
        let b = rot(&q) * nalgebra::Vector3::new(x, y, z);
        prop_assert!((a.x - b.x).abs() + (a.y - b.y).abs() + (a.z - b.z).abs() < 1e-12);
    }

    #[test]
    fn warp_matches_painter(seed in any::<u64>()) {
        let s = micro_scene(&mut rng(seed));
        prop_assert_eq!(warp_micro(&s), painter_micro(&s));
    }
}

#[test]
fn painter_cases_include_occlusions() {
    // the micro scenes are only a useful oracle if points actually collide
    let mut collisions = 0;
    for seed in 0..300 {
        let s = micro_scene(&mut rng(seed));
        let mut px: Vec<_> = s.points.iter().filter_map(|(x, _)| oracle_project(&s.k, &s.target, x)).map(|(u, v, _)| (u, v)).collect();
        let n = px.len();
        px.sort();
        px.dedup();
        collisions += usize::from(px.len() < n);
    }
    assert!(collisions > 10, "only {collisions} occluding cases");
}

#[test]
fn fusion_inverts_recorded_corruption() {
    for (noise, tol) in [(0.0, 1e-12), (0.01, 0.01)] {
        let spec = SceneSpec {
            dense_noise: noise,
            ..SceneSpec::biased_street().with_counts(6, 0).with_size(32, 32)
        };
        let db = generate_scene(&spec, 11).unwrap();
        for r in db.records() {
            let c = r.corruption.unwrap();
            let (_, fit) = fuse_depth(&r.sparse_depth, &r.dense_depth_affine).unwrap();
            let (want_s, want_b) = (1.0 / c.scale, -c.shift / c.scale);
            assert!((fit.scale - want_s).abs() <= tol * want_s.abs(), "{} scale {} vs {}", r.id, fit.scale, want_s);
            // a shift near zero has no useful relative error; compare it to the depth scale
            let d = &r.sparse_depth;
            let mean = (0..d.len()).filter_map(|i| d.get(i)).sum::<f64>() / d.valid_count() as f64;
            assert!((fit.shift - want_b).abs() <= tol * mean, "{} shift {} vs {}", r.id, fit.shift, want_b);
        }
    }
}
