use depthprop::affinity::{fit_bilateral_params, BilateralParams, TrainingScene};
use depthprop::metrics::{depth_metrics, error_vs_distance};
use depthprop::propagation::PropagationMode;
use depthprop::pyramid::{build_scale_bundle, run_coarse_to_fine, FullResInputs, PyramidConfig};
use depthprop::sampling::{detect_keypoints, sample, SamplerConfig, SamplerMode, SparseDepth};
use depthprop::synth::{render_scene, Layout, RenderedView, SceneSpec};
use depthprop::{DepthGrid, Grid2D};

fn first_view(layout: Layout) -> RenderedView {
    render_scene(&SceneSpec::default_for(layout).unwrap()).unwrap().remove(0)
}

fn complete(v: &RenderedView, sparse: &SparseDepth, cfg: &PyramidConfig) -> DepthGrid {
    let inputs = FullResInputs { color: &v.color, normals: &v.normals, sparse, gt: None };
    let bundle = build_scale_bundle(&inputs, cfg, &BilateralParams::default()).unwrap();
    run_coarse_to_fine(&bundle, cfg, PropagationMode::HardReplace).unwrap().pop().unwrap()
}

#[test]
fn checker_corners_are_found_within_a_pixel() {
    let img = Grid2D::from_fn(96, 96, |x, y| if (x / 16 + y / 16) % 2 == 0 { [0.2; 3] } else { [0.8; 3] }).unwrap();
    let kps = detect_keypoints(&img, &SamplerConfig::default()).unwrap();
    let corners: Vec<(f64, f64)> = (1..6).flat_map(|i| (1..6).map(move |j| (16.0 * i as f64, 16.0 * j as f64))).collect();
    let near = |(cx, cy): (f64, f64), x: usize, y: usize| (x as f64 + 0.5 - cx).abs() <= 1.0 && (y as f64 + 0.5 - cy).abs() <= 1.0;
    for &c in &corners {
        assert!(kps.iter().any(|k| near(c, k.x, k.y)), "corner {c:?} missed");
    }
    for k in &kps {
        assert!(corners.iter().any(|&c| near(c, k.x, k.y)), "spurious keypoint {k:?}");
    }
}

#[test]
fn keypoints_land_on_texture() {
    let v = first_view(Layout::TwoWalls);
    let frac = |mode| {
        let s = sample(&v.depth, &v.color, &SamplerConfig { mode, ..Default::default() }).unwrap();
        s.entries().iter().filter(|e| *v.texture_mask.get(e.x, e.y)).count() as f64 / s.len() as f64
    };
    let (kp, uni) = (frac(SamplerMode::Keypoint), frac(SamplerMode::Uniform));
    assert!(kp >= 0.9, "{kp}");
    assert!(kp >= 2.0 * uni, "{kp} vs {uni}");
}

#[test]
fn completion_keeps_samples_and_beats_the_baseline_far_away() {
    let v = first_view(Layout::FarWall);
    let sparse = sample(&v.depth, &v.color, &SamplerConfig::default()).unwrap();
    let ours = complete(&v, &sparse, &PyramidConfig::default());
    let base = complete(&v, &sparse, &PyramidConfig::plain_cspn());
    for e in sparse.entries() {
        assert_eq!(ours.get(e.x, e.y).to_bits(), e.depth.to_bits());
    }
    let far = |pred: &DepthGrid| error_vs_distance(pred, &v.depth, &sparse, 20.0).unwrap().farthest().unwrap().mean_rel;
    assert!(far(&base) > far(&ours), "{} vs {}", far(&base), far(&ours));
    let (m, b) = (depth_metrics(&ours, &v.depth).unwrap(), depth_metrics(&base, &v.depth).unwrap());
    assert!(m.rel < b.rel);
}

#[test]
fn parameter_fit_never_increases_the_loss() {
    let spec = SceneSpec::with_dims(Layout::TwoWalls, 64, 48).unwrap();
    let v = render_scene(&spec).unwrap().remove(0);
    let cfg = SamplerConfig { mode: SamplerMode::Uniform, max_samples: 60, rng_seed: 3, ..Default::default() };
    let sparse = sample(&v.depth, &v.color, &cfg).unwrap();
    let scene = TrainingScene { color: v.color, normals: v.normals, sparse, gt: v.depth, mode: PropagationMode::HardReplace };
    let pyr = PyramidConfig { n_scales: 3, iters_per_scale: 4, ..Default::default() };
    let (_, history) = fit_bilateral_params(&scene, &pyr, BilateralParams::default(), 4, 0.05).unwrap();
    assert_eq!(history.len(), 5);
    for w in history.windows(2) {
        assert!(w[1] <= w[0], "{history:?}");
    }
}
