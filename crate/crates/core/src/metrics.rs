//! Evaluation: depth-map errors, point-cloud accuracy/completeness, error as a
//! function of distance to the nearest sample, and receptive-field analysis.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::affinity::{normalize_affinity, AffinityField, AffinityProvider};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::grids::{distance_to_nearest, is_valid_depth, ColorGrid, DepthGrid, Grid2D, NormalGrid};
use crate::propagation::{run_propagation, KernelSpec, PropagationMode, PropagationState};
use crate::pyramid::{build_scale_bundle, run_coarse_to_fine_from, FullResInputs, PyramidConfig};
use crate::sampling::{SparseDepth, SparseEntry};
use crate::spatial::PointIndex;

/// Inlier ratio thresholds: 1.02, 1.05, 1.10, 1.25, 1.25^2, 1.25^3.
pub const DELTA_THRESHOLDS: [f64; 6] = [1.02, 1.05, 1.10, 1.25, 1.5625, 1.953125];

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMetrics {
    /// Pixels with valid prediction and valid ground truth.
    pub count: usize,
    pub rmse: f64,
    pub mae: f64,
    pub rel: f64,
    /// Inverse-depth errors in 1/km.
    pub irmse: f64,
    pub imae: f64,
    /// Percent of pixels with `max(p/g, g/p) < tau`, paired with `DELTA_THRESHOLDS`.
    pub delta: [f64; 6],
}

impl DepthMetrics {
    pub fn delta_at(&self, tau: f64) -> Option<f64> {
        DELTA_THRESHOLDS.iter().position(|&t| t == tau).map(|i| self.delta[i])
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "count={}", self.count).unwrap();
        writeln!(s, "rmse={}", self.rmse).unwrap();
        writeln!(s, "mae={}", self.mae).unwrap();
        writeln!(s, "rel={}", self.rel).unwrap();
        writeln!(s, "irmse={}", self.irmse).unwrap();
        writeln!(s, "imae={}", self.imae).unwrap();
        for (t, d) in DELTA_THRESHOLDS.iter().zip(&self.delta) {
            writeln!(s, "delta_{t}={d}").unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{:<12} {:>14}", "metric", "value").unwrap();
        writeln!(s, "{:<12} {:>14}", "pixels", self.count).unwrap();
        for (k, v) in [("rmse [m]", self.rmse), ("mae [m]", self.mae), ("rel", self.rel), ("irmse [1/km]", self.irmse), ("imae [1/km]", self.imae)] {
            writeln!(s, "{k:<12} {v:>14.6}").unwrap();
        }
        for (t, d) in DELTA_THRESHOLDS.iter().zip(&self.delta) {
            writeln!(s, "{:<14} {d:>11.2}%", format!("delta<{t}")).unwrap();
        }
        s
    }
}

/// Error statistics over pixels where both maps hold a valid depth.
pub fn depth_metrics(pred: &DepthGrid, gt: &DepthGrid) -> Result<DepthMetrics> {
    pred.expect_dims("prediction", gt.width(), gt.height())?;
    let mut count = 0usize;
    let (mut se, mut ae, mut rel, mut ise, mut iae) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 6];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !is_valid_depth(p) || !is_valid_depth(g) {
            continue;
        }
        count += 1;
        let e = p - g;
        se += e * e;
        ae += e.abs();
        rel += e.abs() / g;
        let ie = 1000.0 / p - 1000.0 / g;
        ise += ie * ie;
        iae += ie.abs();
        let ratio = (p / g).max(g / p);
        for (h, &t) in hits.iter_mut().zip(&DELTA_THRESHOLDS) {
            if ratio < t {
                *h += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Empty("no pixel has both a valid prediction and valid ground truth"));
    }
    let n = count as f64;
    Ok(DepthMetrics {
        count,
        rmse: (se / n).sqrt(),
        mae: ae / n,
        rel: rel / n,
        irmse: (ise / n).sqrt(),
        imae: iae / n,
        delta: hits.map(|h| 100.0 * h as f64 / n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudMetrics {
    /// Percent of predicted points within `threshold` of a ground-truth point.
    pub accuracy: f64,
    /// Percent of ground-truth points within `threshold` of a predicted point.
    pub completeness: f64,
    pub f1: f64,
    /// Meters.
    pub threshold: f64,
}

impl CloudMetrics {
    pub fn to_kv(&self) -> String {
        format!(
            "threshold={}\naccuracy={}\ncompleteness={}\nf1={}\n",
            self.threshold, self.accuracy, self.completeness, self.f1
        )
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<14} {:>10}\n{:<14} {:>10.4}\n{:<14} {:>9.2}%\n{:<14} {:>9.2}%\n{:<14} {:>9.2}%\n",
            "metric", "value", "threshold [m]", self.threshold, "accuracy", self.accuracy, "completeness",
            self.completeness, "f1", self.f1
        )
    }
}

/// Harmonic mean of two percentages, 0 when both are 0.
pub fn f1_score(accuracy: f64, completeness: f64) -> f64 {
    if accuracy + completeness == 0.0 {
        0.0
    } else {
        2.0 * accuracy * completeness / (accuracy + completeness)
    }
}

fn percent_near(queries: &[[f64; 3]], targets: &[[f64; 3]], threshold: f64) -> f64 {
    let index = PointIndex::new(targets, threshold);
    let hits = queries.par_iter().filter(|q| index.any_within(**q, threshold)).count();
    100.0 * hits as f64 / queries.len() as f64
}

pub fn cloud_metrics(pred: &PointCloud, gt: &PointCloud, threshold: f64) -> Result<CloudMetrics> {
    if pred.is_empty() {
        return Err(Error::Empty("predicted cloud is empty"));
    }
    if gt.is_empty() {
        return Err(Error::Empty("ground-truth cloud is empty"));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::invalid(format!("threshold must be positive, got {threshold}")));
    }
    let accuracy = percent_near(&pred.points, &gt.points, threshold);
    let completeness = percent_near(&gt.points, &pred.points, threshold);
    Ok(CloudMetrics { accuracy, completeness, f1: f1_score(accuracy, completeness), threshold })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistanceBin {
    /// Pixel distance range `[lo, hi)`.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// 0 for an empty bin.
    pub mean_rel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    pub bin_width: f64,
    pub bins: Vec<DistanceBin>,
    pub global_rel: f64,
}

impl DistanceHistogram {
    /// Last non-empty bin.
    pub fn farthest(&self) -> Option<&DistanceBin> {
        self.bins.iter().rev().find(|b| b.count > 0)
    }

    pub fn to_kv(&self) -> String {
        let mut s = format!("bin_width={}\nglobal_rel={}\n", self.bin_width, self.global_rel);
        for (i, b) in self.bins.iter().enumerate() {
            writeln!(s, "bin_{i}_count={}\nbin_{i}_rel={}", b.count, b.mean_rel).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>16} {:>10} {:>12}\n", "distance [px]", "pixels", "rel");
        for b in &self.bins {
            writeln!(s, "{:>16} {:>10} {:>12.6}", format!("[{}, {})", b.lo, b.hi), b.count, b.mean_rel).unwrap();
        }
        s
    }
}

/// Mean relative error binned by pixel distance to the nearest sparse sample.
pub fn error_vs_distance(pred: &DepthGrid, gt: &DepthGrid, sparse: &SparseDepth, bin_width: f64) -> Result<DistanceHistogram> {
    pred.expect_dims("prediction", gt.width(), gt.height())?;
    if (sparse.width(), sparse.height()) != gt.dims() {
        return Err(Error::DimensionMismatch {
            what: "sparse depth",
            got_w: sparse.width(),
            got_h: sparse.height(),
            want_w: gt.width(),
            want_h: gt.height(),
        });
    }
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::invalid(format!("bin width must be positive, got {bin_width}")));
    }
    if sparse.is_empty() {
        return Err(Error::Empty("error-vs-distance needs at least one sparse entry"));
    }
    let mut mask = Grid2D::filled(gt.width(), gt.height(), false)?;
    for e in sparse.entries() {
        *mask.get_mut(e.x, e.y) = true;
    }
    let dist = distance_to_nearest(&mask)?;
    let mut sums: Vec<(usize, f64)> = Vec::new();
    let (mut total, mut n) = (0.0, 0usize);
    for ((&p, &g), &d) in pred.data().iter().zip(gt.data()).zip(dist.data()) {
        if !is_valid_depth(p) || !is_valid_depth(g) {
            continue;
        }
        let rel = (p - g).abs() / g;
        let b = (d / bin_width).floor() as usize;
        if sums.len() <= b {
            sums.resize(b + 1, (0, 0.0));
        }
        sums[b].0 += 1;
        sums[b].1 += rel;
        total += rel;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no pixel has both a valid prediction and valid ground truth"));
    }
    let bins = sums
        .into_iter()
        .enumerate()
        .map(|(i, (count, sum))| DistanceBin {
            lo: i as f64 * bin_width,
            hi: (i + 1) as f64 * bin_width,
            count,
            mean_rel: if count == 0 { 0.0 } else { sum / count as f64 },
        })
        .collect();
    Ok(DistanceHistogram { bin_width, bins, global_rel: total / n as f64 })
}

/// What to analyze: one kernel at a single scale, or a full pyramid.
#[derive(Debug, Clone, PartialEq)]
pub enum ReachTarget {
    Kernel(KernelSpec),
    Pyramid(PyramidConfig),
}

impl ReachTarget {
    /// 24 undilated iterations at a single scale.
    pub fn baseline() -> Self {
        ReachTarget::Pyramid(PyramidConfig::plain_cspn())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachReport {
    /// Pixels influenced by the centered impulse.
    pub mask: Grid2D<bool>,
    pub center: (usize, usize),
    /// Largest Chebyshev distance from the center inside the mask.
    pub radius: usize,
    pub area: usize,
    pub baseline_area: usize,
    pub area_ratio: f64,
}

impl ReachReport {
    pub fn to_kv(&self) -> String {
        format!(
            "width={}\nheight={}\nradius={}\narea={}\nbaseline_area={}\narea_ratio={}\n",
            self.mask.width(),
            self.mask.height(),
            self.radius,
            self.area,
            self.baseline_area,
            self.area_ratio
        )
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<14} {:>12}\n{:<14} {:>12}\n{:<14} {:>12}\n{:<14} {:>12}\n{:<14} {:>12.3}\n",
            "grid",
            format!("{}x{}", self.mask.width(), self.mask.height()),
            "radius [px]",
            self.radius,
            "area [px]",
            self.area,
            "baseline area",
            self.baseline_area,
            "area ratio",
            self.area_ratio
        )
    }
}

/// Equal weight on every neighbor and the center. A nonzero pixel therefore
/// stays nonzero, which makes the influence set grow monotonically.
struct ImpulseAffinity;

impl AffinityProvider for ImpulseAffinity {
    fn affinity(&self, color: &ColorGrid, _normals: &NormalGrid, kernel: &KernelSpec) -> Result<AffinityField> {
        let (w, h) = color.dims();
        let share = 1.0 / (kernel.len() + 1) as f64;
        normalize_affinity(w, h, kernel, vec![share; w * h * kernel.len()])
    }
}

fn impulse_depth(w: usize, h: usize, at: (usize, usize)) -> Result<DepthGrid> {
    let mut g = Grid2D::filled(w, h, 0.0)?;
    *g.get_mut(at.0, at.1) = 1.0;
    Ok(g)
}

/// Runs the propagation pipeline on a unit impulse at the grid center, hard
/// mode, zero elsewhere, and marks every pixel whose value left zero.
pub fn influence_mask(target: &ReachTarget, width: usize, height: usize) -> Result<Grid2D<bool>> {
    let center = (width / 2, height / 2);
    let seed = SparseDepth::new(width, height, vec![SparseEntry::new(center.0, center.1, 1.0)])?;
    let out = match target {
        ReachTarget::Kernel(kernel) => {
            let color = Grid2D::filled(width, height, [0.5; 3])?;
            let normals = Grid2D::filled(width, height, [0.0, 0.0, -1.0])?;
            let affinity = ImpulseAffinity.affinity(&color, &normals, kernel)?;
            let state = PropagationState::new(
                impulse_depth(width, height, center)?,
                seed,
                affinity,
                Grid2D::filled(width, height, 1.0)?,
                PropagationMode::HardReplace,
            )?;
            run_propagation(&state, kernel)?
        }
        ReachTarget::Pyramid(cfg) => {
            let color = Grid2D::filled(width, height, [0.5; 3])?;
            let normals = Grid2D::filled(width, height, [0.0, 0.0, -1.0])?;
            let inputs = FullResInputs { color: &color, normals: &normals, sparse: &seed, gt: None };
            let bundle = build_scale_bundle(&inputs, cfg, &ImpulseAffinity)?;
            let coarsest = &bundle.scales[0];
            let (cw, ch) = coarsest.dims();
            let e = coarsest.sparse.entries()[0];
            let init = impulse_depth(cw, ch, (e.x, e.y))?;
            run_coarse_to_fine_from(&bundle, cfg, PropagationMode::HardReplace, init)?
                .pop()
                .expect("at least one scale")
        }
    };
    Ok(out.map(|&v| v != 0.0))
}

fn touches_border(mask: &Grid2D<bool>) -> bool {
    let (w, h) = mask.dims();
    (0..w).any(|x| *mask.get(x, 0) || *mask.get(x, h - 1)) || (0..h).any(|y| *mask.get(0, y) || *mask.get(w - 1, y))
}

fn checked_mask(target: &ReachTarget, width: usize, height: usize) -> Result<Grid2D<bool>> {
    let mask = influence_mask(target, width, height)?;
    if touches_border(&mask) {
        return Err(Error::ReachExceedsGrid { width, height });
    }
    Ok(mask)
}

/// Influence mask, Chebyshev radius and area of `target` on a
/// `width x height` grid, with the area ratio against the undilated
/// 24-iteration single-scale baseline. Fails when the influence reaches the
/// grid border, since the mask would then be clipped.
pub fn receptive_field(target: &ReachTarget, width: usize, height: usize) -> Result<ReachReport> {
    let mask = checked_mask(target, width, height)?;
    let center = (width / 2, height / 2);
    let mut radius = 0;
    let mut area = 0;
    for y in 0..height {
        for x in 0..width {
            if *mask.get(x, y) {
                area += 1;
                radius = radius.max(x.abs_diff(center.0).max(y.abs_diff(center.1)));
            }
        }
    }
    let baseline = ReachTarget::baseline();
    let baseline_area = if *target == baseline {
        area
    } else {
        checked_mask(&baseline, 51, 51)?.data().iter().filter(|&&b| b).count()
    };
    Ok(ReachReport { mask, center, radius, area, baseline_area, area_ratio: area as f64 / baseline_area as f64 })
}

/// Influence mask predicted by set arithmetic alone: each iteration adds the
/// kernel offsets to the current set, each upsampling maps coarse pixel `X` to
/// fine pixels `2X-1 ..= 2X+2` on both axes, and the seed is re-added at every
/// scale.
pub fn predicted_influence(target: &ReachTarget, width: usize, height: usize) -> Result<Grid2D<bool>> {
    let (scales, cfg) = match target {
        ReachTarget::Kernel(k) => (vec![((width, height), k.clone())], None),
        ReachTarget::Pyramid(cfg) => {
            cfg.validate()?;
            let v = (0..cfg.n_scales)
                .map(|s| Ok((cfg.scale_dims(s, width, height), cfg.kernel(s)?)))
                .collect::<Result<Vec<_>>>()?;
            (v, Some(cfg))
        }
    };
    let center = (width / 2, height / 2);
    let mut mask: Option<Grid2D<bool>> = None;
    for (s, ((w, h), kernel)) in scales.iter().enumerate() {
        let level = cfg.map_or(0, |c| c.n_scales - 1 - s);
        let mut cur = match mask.take() {
            None => Grid2D::filled(*w, *h, false)?,
            Some(prev) => Grid2D::from_fn(*w, *h, |x, y| {
                let xs = (x.saturating_sub(1) / 2)..=x.div_ceil(2).min(prev.width() - 1);
                let ys = (y.saturating_sub(1) / 2)..=y.div_ceil(2).min(prev.height() - 1);
                ys.clone().any(|py| xs.clone().any(|px| *prev.get(px, py)))
            })?,
        };
        *cur.get_mut(center.0 >> level, center.1 >> level) = true;
        let offsets = kernel.effective_offsets();
        for _ in 0..kernel.iterations {
            let prev = cur.clone();
            cur = Grid2D::from_fn(*w, *h, |x, y| {
                *prev.get(x, y)
                    || offsets.iter().any(|&(dx, dy)| {
                        let (nx, ny) = (x as i64 + dx as i64, y as i64 + dy as i64);
                        nx >= 0 && ny >= 0 && nx < *w as i64 && ny < *h as i64 && *prev.get(nx as usize, ny as usize)
                    })
            })?;
        }
        mask = Some(cur);
    }
    Ok(mask.expect("at least one scale"))
}
