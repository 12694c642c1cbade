//! Coarse-to-fine propagation over an image pyramid.
//!
//! Scale 0 is the coarsest. It starts from a nearest-neighbor fill of the
//! sparse depth; each finer scale starts from the bilinear upsampling of the
//! previous result. Every scale re-injects its own rescaled sparse depth and
//! uses its own affinity, confidence and dilation.

use serde::Deserialize;

use crate::affinity::{AffinityField, AffinityProvider, BilateralParams};
use crate::error::{Error, Result};
use crate::grids::{
    downsample_by_2, downsample_depth_by_2, downsample_normals_by_2, is_valid_depth, upsample_bilinear_by_2,
    ColorGrid, ConfidenceGrid, DepthGrid, Grid2D, NormalGrid,
};
use crate::propagation::{kernel_3x3_dilated, run_propagation, KernelSpec, PropagationMode, PropagationState};
use crate::sampling::{SparseDepth, SparseEntry};

/// Pyramid resolution step; fixed.
pub const SCALE_FACTOR: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidConfig {
    pub n_scales: usize,
    pub iters_per_scale: usize,
    /// Dilation at the coarsest scale.
    pub base_dilation: u32,
    /// Added to the dilation at each finer scale.
    pub dilation_increment: i32,
}

impl Default for PyramidConfig {
    /// Four scales, eight iterations each, dilation 2 at the coarsest scale
    /// growing by one per finer scale.
    fn default() -> Self {
        Self { n_scales: 4, iters_per_scale: 8, base_dilation: 2, dilation_increment: 1 }
    }
}

impl PyramidConfig {
    /// Single-scale, undilated, 24 iterations: the plain convolutional
    /// propagation baseline.
    pub fn plain_cspn() -> Self {
        Self { n_scales: 1, iters_per_scale: 24, base_dilation: 1, dilation_increment: 0 }
    }

    /// Single-scale with a dilated kernel.
    pub fn dilation_only(dilation: u32) -> Self {
        Self { n_scales: 1, iters_per_scale: 24, base_dilation: dilation, dilation_increment: 0 }
    }

    pub fn dilation(&self, scale: usize) -> Result<u32> {
        let d = self.base_dilation as i64 + scale as i64 * self.dilation_increment as i64;
        if d < 1 {
            return Err(Error::Config(format!("dilation at scale {scale} would be {d}")));
        }
        Ok(d as u32)
    }

    pub fn kernel(&self, scale: usize) -> Result<KernelSpec> {
        kernel_3x3_dilated(self.dilation(scale)?, self.iters_per_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales < 1 {
            return Err(Error::Config("n_scales must be at least 1".into()));
        }
        for k in 0..self.n_scales {
            self.dilation(k)?;
        }
        Ok(())
    }

    /// Grid dims at `scale` for a full-resolution `width x height`.
    pub fn scale_dims(&self, scale: usize, width: usize, height: usize) -> (usize, usize) {
        let div = 1usize << (self.n_scales - 1 - scale);
        (width.div_ceil(div), height.div_ceil(div))
    }

    /// Loss weights, coarse to fine: 1, 2, ..., n.
    pub fn loss_weights(&self) -> Vec<f64> {
        (1..=self.n_scales).map(|w| w as f64).collect()
    }
}

/// File form of the completion settings. Every field is optional; unknown keys
/// are an error.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionConfigFile {
    pub n_scales: Option<usize>,
    pub iters_per_scale: Option<usize>,
    pub base_dilation: Option<u32>,
    pub dilation_increment: Option<i32>,
    pub mode: Option<String>,
    pub sigma_color: Option<f64>,
    pub sigma_normal: Option<f64>,
    pub center_bias: Option<f64>,
}

impl CompletionConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overlays the set fields onto `cfg` and `mode`.
    pub fn apply(&self, cfg: &mut PyramidConfig, mode: &mut PropagationMode) -> Result<()> {
        if let Some(v) = self.n_scales {
            cfg.n_scales = v;
        }
        if let Some(v) = self.iters_per_scale {
            cfg.iters_per_scale = v;
        }
        if let Some(v) = self.base_dilation {
            cfg.base_dilation = v;
        }
        if let Some(v) = self.dilation_increment {
            cfg.dilation_increment = v;
        }
        if let Some(m) = &self.mode {
            *mode = m.parse()?;
        }
        cfg.validate()
    }

    /// Overlays the set affinity fields onto `p`.
    pub fn apply_bilateral(&self, p: &mut BilateralParams) -> Result<()> {
        if let Some(v) = self.sigma_color {
            p.sigma_color = v;
        }
        if let Some(v) = self.sigma_normal {
            p.sigma_normal = v;
        }
        if let Some(v) = self.center_bias {
            p.center_bias = v;
        }
        p.validate()
    }
}

/// Inputs of one completion problem at full resolution.
#[derive(Debug, Clone, Copy)]
pub struct FullResInputs<'a> {
    pub color: &'a ColorGrid,
    pub normals: &'a NormalGrid,
    pub sparse: &'a SparseDepth,
    pub gt: Option<&'a DepthGrid>,
}

#[derive(Debug, Clone)]
pub struct Scale {
    pub color: ColorGrid,
    pub normals: NormalGrid,
    pub sparse: SparseDepth,
    pub affinity: AffinityField,
    pub pixel_conf: ConfidenceGrid,
    pub kernel: KernelSpec,
}

impl Scale {
    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }
}

/// Per-scale inputs, coarsest first.
#[derive(Debug, Clone)]
pub struct ScaleBundle {
    pub scales: Vec<Scale>,
    /// Full-resolution ground truth, when available.
    pub gt: Option<DepthGrid>,
}

impl ScaleBundle {
    pub fn finest(&self) -> &Scale {
        self.scales.last().expect("bundle has at least one scale")
    }

    /// Ground truth at every scale (coarsest first), reduced with the
    /// invalid-aware block mean.
    pub fn gt_pyramid(&self) -> Result<Vec<DepthGrid>> {
        let gt = self.gt.as_ref().ok_or(Error::Empty("bundle has no ground truth"))?;
        let mut out = vec![gt.clone()];
        for _ in 1..self.scales.len() {
            let next = downsample_depth_by_2(out.last().unwrap())?;
            out.push(next);
        }
        out.reverse();
        Ok(out)
    }
}

/// Maps sparse entries to a grid `2^level` times smaller. When several land on
/// one pixel the higher confidence wins, then the smaller depth.
pub fn rescale_sparse(sparse: &SparseDepth, level: usize, width: usize, height: usize) -> Result<SparseDepth> {
    if level == 0 {
        return Ok(sparse.clone());
    }
    let mut slots: Vec<Option<SparseEntry>> = vec![None; width * height];
    for e in sparse.entries() {
        let (x, y) = (e.x >> level, e.y >> level);
        let slot = &mut slots[y * width + x];
        let better = match slot {
            None => true,
            Some(cur) => e.conf > cur.conf || (e.conf == cur.conf && e.depth < cur.depth),
        };
        if better {
            *slot = Some(SparseEntry { x, y, ..*e });
        }
    }
    SparseDepth::new(width, height, slots.into_iter().flatten().collect())
}

pub fn build_scale_bundle(inputs: &FullResInputs<'_>, cfg: &PyramidConfig, provider: &dyn AffinityProvider) -> Result<ScaleBundle> {
    cfg.validate()?;
    let (w, h) = inputs.color.dims();
    inputs.normals.expect_dims("normals", w, h)?;
    if (inputs.sparse.width(), inputs.sparse.height()) != (w, h) {
        return Err(Error::DimensionMismatch {
            what: "sparse depth",
            got_w: inputs.sparse.width(),
            got_h: inputs.sparse.height(),
            want_w: w,
            want_h: h,
        });
    }
    if let Some(gt) = inputs.gt {
        gt.expect_dims("ground truth", w, h)?;
    }
    let min = 1usize << (cfg.n_scales - 1);
    if w < min || h < min {
        return Err(Error::Dimensions(format!("{w}x{h} is too small for {} scales (need {min} per axis)", cfg.n_scales)));
    }

    let mut colors = vec![inputs.color.clone()];
    let mut normals = vec![inputs.normals.clone()];
    for _ in 1..cfg.n_scales {
        colors.push(downsample_by_2(colors.last().unwrap())?);
        normals.push(downsample_normals_by_2(normals.last().unwrap())?);
    }
    colors.reverse();
    normals.reverse();

    let mut scales = Vec::with_capacity(cfg.n_scales);
    for (k, (color, normals)) in colors.into_iter().zip(normals).enumerate() {
        let (sw, sh) = color.dims();
        debug_assert_eq!((sw, sh), cfg.scale_dims(k, w, h));
        let sparse = rescale_sparse(inputs.sparse, cfg.n_scales - 1 - k, sw, sh)?;
        let kernel = cfg.kernel(k)?;
        let affinity = provider.affinity(&color, &normals, &kernel)?;
        let pixel_conf = provider.pixel_confidence(&sparse, &color)?;
        scales.push(Scale { color, normals, sparse, affinity, pixel_conf, kernel });
    }
    Ok(ScaleBundle { scales, gt: inputs.gt.cloned() })
}

const BUCKET: usize = 16;

/// Nearest-neighbor fill: every pixel takes the depth of the closest sparse
/// entry (Euclidean), ties going to the smaller depth.
pub fn coarse_init(sparse: &SparseDepth, width: usize, height: usize) -> Result<DepthGrid> {
    if sparse.is_empty() {
        return Err(Error::Empty("coarse initialization needs at least one sparse entry"));
    }
    if (sparse.width(), sparse.height()) != (width, height) {
        return Err(Error::DimensionMismatch {
            what: "sparse depth",
            got_w: sparse.width(),
            got_h: sparse.height(),
            want_w: width,
            want_h: height,
        });
    }
    let (bw, bh) = (width.div_ceil(BUCKET), height.div_ceil(BUCKET));
    let mut buckets: Vec<Vec<&SparseEntry>> = vec![Vec::new(); bw * bh];
    for e in sparse.entries() {
        buckets[(e.y / BUCKET) * bw + e.x / BUCKET].push(e);
    }
    let max_ring = bw.max(bh) as i64;

    use rayon::prelude::*;
    let mut data = vec![0.0; width * height];
    data.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let by = (y / BUCKET) as i64;
        for (x, out) in row.iter_mut().enumerate() {
            let bx = (x / BUCKET) as i64;
            let mut best: Option<(i64, f64)> = None;
            for ring in 0..=max_ring {
                if let Some((d2, _)) = best {
                    // nearest possible pixel in this ring is (ring - 1) buckets
                    // plus at least one pixel away
                    let gap = (ring - 1) * BUCKET as i64 + 1;
                    if gap > 0 && gap * gap > d2 {
                        break;
                    }
                }
                for qy in by - ring..=by + ring {
                    for qx in bx - ring..=bx + ring {
                        if (qy - by).abs() != ring && (qx - bx).abs() != ring {
                            continue;
                        }
                        if qx < 0 || qy < 0 || qx >= bw as i64 || qy >= bh as i64 {
                            continue;
                        }
                        for e in &buckets[qy as usize * bw + qx as usize] {
                            let dx = e.x as i64 - x as i64;
                            let dy = e.y as i64 - y as i64;
                            let d2 = dx * dx + dy * dy;
                            let better = match best {
                                None => true,
                                Some((bd, bv)) => d2 < bd || (d2 == bd && e.depth < bv),
                            };
                            if better {
                                best = Some((d2, e.depth));
                            }
                        }
                    }
                }
            }
            *out = best.expect("sparse set is nonempty").1;
        }
    });
    Grid2D::from_vec(width, height, data)
}

/// Runs every scale and returns the refined depth of each, coarsest first.
pub fn run_coarse_to_fine(bundle: &ScaleBundle, cfg: &PyramidConfig, mode: PropagationMode) -> Result<Vec<DepthGrid>> {
    let coarsest = &bundle.scales[0];
    let (w, h) = coarsest.dims();
    let init = coarse_init(&coarsest.sparse, w, h)?;
    run_coarse_to_fine_from(bundle, cfg, mode, init)
}

/// As [`run_coarse_to_fine`] but starting from a caller-supplied depth at the
/// coarsest scale.
pub fn run_coarse_to_fine_from(
    bundle: &ScaleBundle,
    cfg: &PyramidConfig,
    mode: PropagationMode,
    init: DepthGrid,
) -> Result<Vec<DepthGrid>> {
    cfg.validate()?;
    if bundle.scales.len() != cfg.n_scales {
        return Err(Error::Config(format!(
            "bundle has {} scales, config expects {}",
            bundle.scales.len(),
            cfg.n_scales
        )));
    }
    let mut outputs: Vec<DepthGrid> = Vec::with_capacity(cfg.n_scales);
    for (k, scale) in bundle.scales.iter().enumerate() {
        let (w, h) = scale.dims();
        let start = match outputs.last() {
            None => {
                init.expect_dims("initial depth", w, h)?;
                init.clone()
            }
            Some(prev) => upsample_bilinear_by_2(prev, w, h)?,
        };
        let kernel = cfg.kernel(k)?;
        let state = PropagationState::new(
            start,
            scale.sparse.clone(),
            scale.affinity.clone(),
            scale.pixel_conf.clone(),
            mode,
        )?;
        outputs.push(run_propagation(&state, &kernel)?);
    }
    Ok(outputs)
}

/// Weighted sum over scales of the mean absolute error on valid ground-truth
/// pixels, weights 1, 2, ... from coarsest to finest.
pub fn multiscale_loss(preds: &[DepthGrid], gts: &[DepthGrid], cfg: &PyramidConfig) -> Result<f64> {
    if preds.len() != cfg.n_scales || gts.len() != cfg.n_scales {
        return Err(Error::Config(format!(
            "{} predictions and {} ground truths for {} scales",
            preds.len(),
            gts.len(),
            cfg.n_scales
        )));
    }
    let mut loss = 0.0;
    for (k, ((p, g), wgt)) in preds.iter().zip(gts).zip(cfg.loss_weights()).enumerate() {
        p.expect_dims("prediction", g.width(), g.height())?;
        let (sum, n) = p
            .data()
            .iter()
            .zip(g.data())
            .filter(|(_, g)| is_valid_depth(**g))
            .fold((0.0, 0usize), |(s, n), (p, g)| (s + (p - g).abs(), n + 1));
        if n == 0 {
            return Err(Error::Empty(if k == 0 { "ground truth at the coarsest scale has no valid pixel" } else { "ground truth at some scale has no valid pixel" }));
        }
        loss += wgt * sum / n as f64;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::{BilateralParams, UniformAffinity};

    fn flat_inputs(w: usize, h: usize) -> (ColorGrid, NormalGrid) {
        (Grid2D::filled(w, h, [0.5; 3]).unwrap(), Grid2D::filled(w, h, [0.0, 0.0, -1.0]).unwrap())
    }

    #[test]
    fn default_config() {
        let c = PyramidConfig::default();
        assert_eq!((c.n_scales, c.iters_per_scale), (4, 8));
        let d: Vec<u32> = (0..4).map(|k| c.dilation(k).unwrap()).collect();
        assert_eq!(d, vec![2, 3, 4, 5]);
        assert_eq!(c.loss_weights(), vec![1.0, 2.0, 3.0, 4.0]);
        let bad = PyramidConfig { base_dilation: 1, dilation_increment: -1, n_scales: 2, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_file_overlay() {
        let f = CompletionConfigFile::parse("n_scales = 1\niters_per_scale = 24\nmode = \"conf\"\n").unwrap();
        let mut cfg = PyramidConfig::default();
        let mut mode = PropagationMode::HardReplace;
        f.apply(&mut cfg, &mut mode).unwrap();
        assert_eq!(cfg.n_scales, 1);
        assert_eq!(cfg.iters_per_scale, 24);
        assert_eq!(cfg.base_dilation, 2);
        assert_eq!(mode, PropagationMode::ConfidenceBlend);
        assert!(CompletionConfigFile::parse("n_scale = 1\n").is_err());
    }

    #[test]
    fn single_scale_bundle_is_verbatim() {
        let (c, n) = flat_inputs(10, 6);
        let s = SparseDepth::new(10, 6, vec![SparseEntry::new(3, 2, 1.0), SparseEntry::new(1, 1, 2.0)]).unwrap();
        let cfg = PyramidConfig { n_scales: 1, ..Default::default() };
        let inputs = FullResInputs { color: &c, normals: &n, sparse: &s, gt: None };
        let b = build_scale_bundle(&inputs, &cfg, &UniformAffinity).unwrap();
        assert_eq!(b.scales.len(), 1);
        assert_eq!(b.scales[0].color, c);
        assert_eq!(b.scales[0].normals, n);
        assert_eq!(b.scales[0].sparse, s);
    }

    #[test]
    fn sparse_rescaling() {
        let s = SparseDepth::new(16, 16, vec![SparseEntry::new(8, 8, 1.0)]).unwrap();
        let r = rescale_sparse(&s, 3, 2, 2).unwrap();
        assert_eq!((r.entries()[0].x, r.entries()[0].y), (1, 1));

        let s = SparseDepth::new(
            4,
            4,
            vec![SparseEntry::with_conf(0, 0, 5.0, 0.4), SparseEntry::with_conf(1, 1, 9.0, 0.9)],
        )
        .unwrap();
        let r = rescale_sparse(&s, 1, 2, 2).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r.entries()[0].depth, 9.0);

        let s = SparseDepth::new(4, 4, vec![SparseEntry::new(0, 0, 5.0), SparseEntry::new(1, 0, 3.0)]).unwrap();
        assert_eq!(rescale_sparse(&s, 1, 2, 2).unwrap().entries()[0].depth, 3.0);
    }

    #[test]
    fn scale_dims_follow_ceil_chain() {
        let (c, n) = flat_inputs(37, 21);
        let s = SparseDepth::new(37, 21, vec![SparseEntry::new(36, 20, 1.0)]).unwrap();
        let cfg = PyramidConfig::default();
        let b = build_scale_bundle(&FullResInputs { color: &c, normals: &n, sparse: &s, gt: None }, &cfg, &UniformAffinity).unwrap();
        let dims: Vec<_> = b.scales.iter().map(|s| s.dims()).collect();
        assert_eq!(dims, vec![(5, 3), (10, 6), (19, 11), (37, 21)]);
        for (k, d) in dims.iter().enumerate() {
            assert_eq!(*d, cfg.scale_dims(k, 37, 21));
        }
        assert_eq!(b.scales[0].sparse.entries()[0].x, 4);
    }

    #[test]
    fn too_small_for_scales() {
        let (c, n) = flat_inputs(7, 16);
        let s = SparseDepth::new(7, 16, vec![SparseEntry::new(0, 0, 1.0)]).unwrap();
        let r = build_scale_bundle(&FullResInputs { color: &c, normals: &n, sparse: &s, gt: None }, &PyramidConfig::default(), &UniformAffinity);
        assert!(matches!(r, Err(Error::Dimensions(_))));
    }

    #[test]
    fn coarse_init_rules() {
        let s = SparseDepth::new(5, 4, vec![SparseEntry::new(2, 1, 3.0)]).unwrap();
        assert!(coarse_init(&s, 5, 4).unwrap().data().iter().all(|&v| v == 3.0));

        let s = SparseDepth::new(5, 1, vec![SparseEntry::new(0, 0, 4.0), SparseEntry::new(4, 0, 2.0)]).unwrap();
        let g = coarse_init(&s, 5, 1).unwrap();
        assert_eq!(g.data(), &[4.0, 4.0, 2.0, 2.0, 2.0]);

        let empty = SparseDepth::new(5, 1, vec![]).unwrap();
        assert!(matches!(coarse_init(&empty, 5, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn coarse_init_matches_all_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for (w, h, n) in [(8, 8, 5), (70, 50, 30), (40, 33, 3)] {
            let mut entries = Vec::new();
            while entries.len() < n {
                let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
                if entries.iter().any(|e: &SparseEntry| (e.x, e.y) == (x, y)) {
                    continue;
                }
                entries.push(SparseEntry::new(x, y, rng.gen_range(1..5) as f64));
            }
            let s = SparseDepth::new(w, h, entries.clone()).unwrap();
            let g = coarse_init(&s, w, h).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let want = entries
                        .iter()
                        .map(|e| ((e.x as i64 - x as i64).pow(2) + (e.y as i64 - y as i64).pow(2), e.depth))
                        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
                        .unwrap()
                        .1;
                    assert_eq!(*g.get(x, y), want);
                }
            }
        }
    }

    #[test]
    fn constant_scene_is_a_fixed_point() {
        let (w, h) = (40, 24);
        let c = Grid2D::from_fn(w, h, |x, y| [(x % 7) as f64 / 7.0, (y % 5) as f64 / 5.0, 0.3]).unwrap();
        let n = Grid2D::filled(w, h, [0.0, 0.0, -1.0]).unwrap();
        let gt = Grid2D::filled(w, h, 2.7).unwrap();
        let s = SparseDepth::new(w, h, vec![SparseEntry::new(3, 3, 2.7), SparseEntry::new(30, 20, 2.7)]).unwrap();
        let cfg = PyramidConfig::default();
        let inputs = FullResInputs { color: &c, normals: &n, sparse: &s, gt: Some(&gt) };
        let b = build_scale_bundle(&inputs, &cfg, &BilateralParams::default()).unwrap();
        for mode in [PropagationMode::HardReplace, PropagationMode::ConfidenceBlend] {
            let preds = run_coarse_to_fine(&b, &cfg, mode).unwrap();
            for p in &preds {
                assert!(p.data().iter().all(|&v| v == 2.7));
            }
            assert_eq!(multiscale_loss(&preds, &b.gt_pyramid().unwrap(), &cfg).unwrap(), 0.0);
        }
    }

    #[test]
    fn loss_weighting() {
        let cfg = PyramidConfig { n_scales: 2, ..Default::default() };
        let gts = vec![Grid2D::filled(2, 2, 1.0).unwrap(), Grid2D::filled(4, 4, 1.0).unwrap()];
        let preds = vec![Grid2D::filled(2, 2, 1.1).unwrap(), Grid2D::filled(4, 4, 1.2).unwrap()];
        let l = multiscale_loss(&preds, &gts, &cfg).unwrap();
        assert!((l - 0.5).abs() < 1e-12, "{l}");
        assert_eq!(multiscale_loss(&gts, &gts, &cfg).unwrap(), 0.0);
        let mut bad = gts.clone();
        bad[0] = Grid2D::filled(2, 2, 0.0).unwrap();
        assert!(matches!(multiscale_loss(&preds, &bad, &cfg), Err(Error::Empty(_))));
    }

    #[test]
    fn invalid_gt_pixels_are_ignored() {
        let cfg = PyramidConfig { n_scales: 1, ..Default::default() };
        let gt = Grid2D::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let pred = Grid2D::from_vec(2, 1, vec![1.5, 9.0]).unwrap();
        assert_eq!(multiscale_loss(&[pred], &[gt], &cfg).unwrap(), 0.5);
    }
}
