use depthprop::geometry::{backproject, fuse_depths, project, CameraView, FusionConfig, Intrinsics};
use depthprop::Grid2D;
use nalgebra::{Point3, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn intrinsics(w: usize, h: usize) -> Intrinsics {
    Intrinsics { fx: 0.8 * w as f64, fy: 0.8 * w as f64, cx: (w as f64 - 1.0) / 2.0, cy: (h as f64 - 1.0) / 2.0 }
}

fn random_view(rng: &mut ChaCha8Rng) -> CameraView {
    let k = Intrinsics { fx: rng.gen_range(50.0..900.0), fy: rng.gen_range(50.0..900.0), cx: rng.gen_range(0.0..640.0), cy: rng.gen_range(0.0..480.0) };
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0));
    let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen_range(-3.0..3.0));
    let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    CameraView::new(k, *rot.matrix(), t).unwrap()
}

/// Camera at `center` looking down +z, viewing the wall z = `wall`.
fn frontal(w: usize, h: usize, center: Vector3<f64>, wall: f64) -> (CameraView, Grid2D<f64>) {
    let view = CameraView::new(intrinsics(w, h), nalgebra::Matrix3::identity(), -center).unwrap();
    let depth = Grid2D::filled(w, h, wall - center.z).unwrap();
    (view, depth)
}

fn noisy_views(seed: u64) -> Vec<(CameraView, Grid2D<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|i| {
            let (v, d) = frontal(24, 18, Vector3::new(0.05 * i as f64, 0.0, 0.0), 3.0);
            let d = d.map(|&z| if rng.gen_bool(0.1) { 0.0 } else { z + rng.gen_range(-0.3..0.3) });
            (v, d)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_inverts_backproject(seed in any::<u64>(), x in -50.0f64..700.0, y in -50.0f64..500.0, d in 0.05f64..100.0) {
        let view = random_view(&mut ChaCha8Rng::seed_from_u64(seed));
        let p = backproject(&view, x, y, d).unwrap();
        let (u, v, z) = project(&view, &p).unwrap();
        prop_assert!((u - x).abs() <= 1e-9 * x.abs().max(1.0));
        prop_assert!((v - y).abs() <= 1e-9 * y.abs().max(1.0));
        prop_assert!((z - d).abs() <= 1e-9 * d);
    }

    #[test]
    fn camera_lines_round_trip(seed in any::<u64>()) {
        let view = random_view(&mut ChaCha8Rng::seed_from_u64(seed));
        let back = CameraView::from_line(&view.to_line()).unwrap();
        let p = Point3::new(0.3, -0.2, 4.0);
        let (a, b) = (view.to_camera(&p), back.to_camera(&p));
        prop_assert!((a - b).norm() <= 1e-9);
    }

    #[test]
    fn looser_threshold_keeps_more(seed in any::<u64>(), t in 0.01f64..0.5, extra in 0.0f64..0.5) {
        let views = noisy_views(seed);
        let strict = fuse_depths(&views, &FusionConfig { depth_threshold: t, min_consistent_views: 2 }).unwrap();
        let loose = fuse_depths(&views, &FusionConfig { depth_threshold: t + extra, min_consistent_views: 2 }).unwrap();
        prop_assert!(loose.len() >= strict.len());
    }

    #[test]
    fn more_required_views_keeps_fewer(seed in any::<u64>(), t in 0.01f64..0.5, m in 1usize..4) {
        let views = noisy_views(seed);
        let a = fuse_depths(&views, &FusionConfig { depth_threshold: t, min_consistent_views: m }).unwrap();
        let b = fuse_depths(&views, &FusionConfig { depth_threshold: t, min_consistent_views: m + 1 }).unwrap();
        prop_assert!(a.len() >= b.len());
    }

    #[test]
    fn translated_frontal_views_reproduce_the_wall(dx in -0.3f64..0.3, dy in -0.3f64..0.3, dz in -0.5f64..0.5, wall in 2.0f64..8.0) {
        let views = vec![frontal(32, 24, Vector3::zeros(), wall), frontal(32, 24, Vector3::new(dx, dy, dz), wall)];
        let cloud = fuse_depths(&views, &FusionConfig::default()).unwrap();
        prop_assert!(!cloud.is_empty());
        for p in &cloud.points {
            prop_assert!((p[2] - wall).abs() <= 1e-6, "z = {}", p[2]);
        }
    }
}

#[test]
fn fusion_is_deterministic() {
    let views = noisy_views(9);
    let cfg = FusionConfig::default();
    assert_eq!(fuse_depths(&views, &cfg).unwrap().points, fuse_depths(&views, &cfg).unwrap().points);
}
