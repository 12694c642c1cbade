use depthprop::sampling::{sample_uniform, SamplerConfig, SamplerMode};
use depthprop::Grid2D;

#[test]
fn uniform_selection_frequencies_are_binomial() {
    let (side, draws, per_draw) = (100usize, 10_000usize, 100usize);
    let gt = Grid2D::filled(side, side, 2.0).unwrap();
    let mut hits = vec![0u32; side * side];
    for seed in 0..draws as u64 {
        let cfg = SamplerConfig { mode: SamplerMode::Uniform, max_samples: per_draw, rng_seed: seed, ..Default::default() };
        for e in sample_uniform(&gt, &cfg).unwrap().entries() {
            hits[e.y * side + e.x] += 1;
        }
    }
    let p = per_draw as f64 / (side * side) as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let outside = hits.iter().filter(|&&h| (h as f64 - mean).abs() > 3.0 * sd).count();
    // 0.27% of pixels fall outside 3 sd by chance alone
    assert!(outside as f64 <= 0.005 * hits.len() as f64, "{outside} pixels outside 3 sd");
    // 5.3 sd keeps the family-wise false alarm rate near 1e-3 over 1e4 pixels
    let worst = hits.iter().map(|&h| (h as f64 - mean).abs() / sd).fold(0.0, f64::max);
    assert!(worst <= 5.3, "worst pixel {worst:.2} sd from the mean");
}
