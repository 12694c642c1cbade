use depthprop::affinity::{normalize_affinity, AffinityField};
use depthprop::grids::Grid2D;
use depthprop::propagation::{
    kernel_3x3_dilated, propagate_step_conf, propagate_step_hard, run_propagation, KernelSpec, PropagationMode,
    PropagationState,
};
use depthprop::sampling::{SparseDepth, SparseEntry};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Instance {
    state: PropagationState,
    kernel: KernelSpec,
}

fn random_instance(w: usize, h: usize, dilation: u32, mode: PropagationMode, signed: bool, full_conf: bool, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = kernel_3x3_dilated(dilation, 1).unwrap();
    let raw: Vec<f64> = (0..w * h * kernel.len())
        .map(|_| if signed { rng.gen_range(-1.0..1.0) } else { rng.gen_range(0.0..1.0) })
        .collect();
    let affinity = normalize_affinity(w, h, &kernel, raw).unwrap();
    let depth = Grid2D::from_fn(w, h, |_, _| rng.gen_range(0.5..10.0)).unwrap();
    let mut entries = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if rng.gen_bool(0.2) {
                entries.push(SparseEntry::with_conf(x, y, rng.gen_range(0.5..10.0), rng.gen_range(0.0..=1.0)));
            }
        }
    }
    let sparse = SparseDepth::new(w, h, entries).unwrap();
    let pixel_conf = Grid2D::from_fn(w, h, |_, _| if full_conf { 1.0 } else { rng.gen_range(0.0..=1.0) }).unwrap();
    Instance { state: PropagationState::new(depth, sparse, affinity, pixel_conf, mode).unwrap(), kernel }
}

/// Direct evaluation of one step: weighted sum over the kernel, then the
/// sparse rule.
fn direct_step(s: &PropagationState, kernel: &KernelSpec) -> Grid2D<f64> {
    let (w, h) = s.depth.dims();
    let a: &AffinityField = &s.affinity;
    let offsets = kernel.effective_offsets();
    let mut out = s.depth.clone();
    for y in 0..h {
        for x in 0..w {
            let (nw, wc) = a.at(x, y);
            let mut v = wc * s.depth.get(x, y);
            for (k, &(dx, dy)) in offsets.iter().enumerate() {
                let (nx, ny) = (x as i64 + dx as i64, y as i64 + dy as i64);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let (nx, ny) = (nx as usize, ny as usize);
                let c = match s.mode {
                    PropagationMode::HardReplace => 1.0,
                    PropagationMode::ConfidenceBlend => *s.pixel_conf.get(nx, ny),
                };
                v += nw[k] * c * s.depth.get(nx, ny);
            }
            if let Some(e) = s.sparse.entries().iter().find(|e| e.x == x && e.y == y) {
                v = match s.mode {
                    PropagationMode::HardReplace => e.depth,
                    PropagationMode::ConfidenceBlend => e.conf * e.depth + (1.0 - e.conf) * v,
                };
            }
            *out.get_mut(x, y) = v;
        }
    }
    out
}

fn step(s: &PropagationState) -> Grid2D<f64> {
    match s.mode {
        PropagationMode::HardReplace => propagate_step_hard(s).unwrap(),
        PropagationMode::ConfidenceBlend => propagate_step_conf(s).unwrap(),
    }
}

fn modes() -> impl Strategy<Value = PropagationMode> {
    prop_oneof![Just(PropagationMode::HardReplace), Just(PropagationMode::ConfidenceBlend)]
}

fn bounds(s: &PropagationState) -> (f64, f64) {
    let vals = s.depth.data().iter().copied().chain(s.sparse.entries().iter().map(|e| e.depth));
    vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn step_matches_direct_evaluation(w in 1usize..20, h in 1usize..20, d in 1u32..4, mode in modes(), seed in any::<u64>()) {
        let inst = random_instance(w, h, d, mode, true, false, seed);
        let got = step(&inst.state);
        let want = direct_step(&inst.state, &inst.kernel);
        for (g, o) in got.data().iter().zip(want.data()) {
            prop_assert!((g - o).abs() <= 1e-12 * o.abs().max(1.0), "{g} vs {o}");
        }
    }

    #[test]
    fn step_is_linear_without_samples(w in 2usize..16, h in 2usize..16, d in 1u32..3, mode in modes(),
                                      alpha in -3.0f64..3.0, beta in -3.0f64..3.0, seed in any::<u64>()) {
        let mut a = random_instance(w, h, d, mode, true, false, seed);
        a.state.sparse = SparseDepth::new(w, h, vec![]).unwrap();
        let mut b = a.state.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        b.depth = Grid2D::from_fn(w, h, |_, _| rng.gen_range(-5.0..5.0)).unwrap();
        let mut mix = a.state.clone();
        mix.depth = Grid2D::from_fn(w, h, |x, y| alpha * a.state.depth.get(x, y) + beta * b.depth.get(x, y)).unwrap();
        let (sa, sb, sm) = (step(&a.state), step(&b), step(&mix));
        for i in 0..sm.len() {
            let want = alpha * sa.data()[i] + beta * sb.data()[i];
            prop_assert!((sm.data()[i] - want).abs() <= 1e-11 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn nonnegative_weights_stay_within_bounds(w in 1usize..16, h in 1usize..16, d in 1u32..4, mode in modes(), seed in any::<u64>()) {
        // confidence blending only averages when neighbors carry full confidence
        let inst = random_instance(w, h, d, mode, false, true, seed);
        let (lo, hi) = bounds(&inst.state);
        let out = step(&inst.state);
        for &v in out.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn hard_mode_keeps_samples(w in 1usize..16, h in 1usize..16, d in 1u32..4, iters in 0usize..6, seed in any::<u64>()) {
        let inst = random_instance(w, h, d, PropagationMode::HardReplace, true, false, seed);
        let k = kernel_3x3_dilated(d, iters).unwrap();
        let mut state = inst.state.clone();
        if iters > 0 {
            // the initial grid plays no role for sampled pixels after a step
            state.depth = Grid2D::filled(w, h, 0.0).unwrap();
        }
        let out = run_propagation(&state, &k).unwrap();
        if iters > 0 {
            for e in state.sparse.entries() {
                prop_assert_eq!(out.get(e.x, e.y).to_bits(), e.depth.to_bits());
            }
        }
    }

    #[test]
    fn iterations_compose(w in 2usize..12, h in 2usize..12, d in 1u32..3, mode in modes(), n in 1usize..4, m in 1usize..4, seed in any::<u64>()) {
        let inst = random_instance(w, h, d, mode, true, false, seed);
        let all = run_propagation(&inst.state, &kernel_3x3_dilated(d, n + m).unwrap()).unwrap();
        let mut mid = inst.state.clone();
        mid.depth = run_propagation(&inst.state, &kernel_3x3_dilated(d, n).unwrap()).unwrap();
        let split = run_propagation(&mid, &kernel_3x3_dilated(d, m).unwrap()).unwrap();
        prop_assert_eq!(all, split);
    }
}

#[test]
fn confidence_below_one_can_leave_the_bounds() {
    // with a low-confidence neighbor the update shrinks toward zero, so the
    // bound has to include 0 unless every pixel confidence is 1
    let k = kernel_3x3_dilated(1, 1).unwrap();
    let aff = normalize_affinity(3, 1, &k, vec![1.0; 3 * 8]).unwrap();
    let depth = Grid2D::from_vec(3, 1, vec![5.0, 5.0, 5.0]).unwrap();
    let conf = Grid2D::from_vec(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    let s = PropagationState::new(depth, SparseDepth::new(3, 1, vec![]).unwrap(), aff, conf, PropagationMode::ConfidenceBlend).unwrap();
    let out = propagate_step_conf(&s).unwrap();
    assert!(*out.get(1, 0) < 5.0);
}
