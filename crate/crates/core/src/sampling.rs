//! Sparse depth observations and the samplers that produce them.
//!
//! Randomness comes from `ChaCha8Rng::seed_from_u64(rng_seed)`, whose output
//! stream is fixed across platforms and releases of `rand_chacha` 0.3, so a
//! seed pins the exact sample set.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{is_valid_depth, ColorGrid, DepthGrid, Grid2D};
use crate::spatial::PointIndex;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub x: usize,
    pub y: usize,
    /// Meters, > 0.
    pub depth: f64,
    /// Input confidence in `[0, 1]`.
    pub conf: f64,
}

impl SparseEntry {
    pub fn new(x: usize, y: usize, depth: f64) -> Self {
        Self { x, y, depth, conf: 1.0 }
    }

    pub fn with_conf(x: usize, y: usize, depth: f64, conf: f64) -> Self {
        Self { x, y, depth, conf }
    }
}

/// Known depths on a `width x height` grid. Coordinates are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth {
    width: usize,
    height: usize,
    entries: Vec<SparseEntry>,
}

impl SparseDepth {
    pub fn new(width: usize, height: usize, entries: Vec<SparseEntry>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimensions(format!("{width}x{height} host grid")));
        }
        let mut seen = vec![false; width * height];
        for e in &entries {
            if e.x >= width || e.y >= height {
                return Err(Error::invalid(format!("sparse entry ({}, {}) out of bounds", e.x, e.y)));
            }
            if !(e.depth > 0.0) || !e.depth.is_finite() {
                return Err(Error::invalid(format!("sparse depth {} at ({}, {})", e.depth, e.x, e.y)));
            }
            if !(0.0..=1.0).contains(&e.conf) {
                return Err(Error::invalid(format!("sparse confidence {} at ({}, {})", e.conf, e.x, e.y)));
            }
            let i = e.y * width + e.x;
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("duplicate sparse coordinate ({}, {})", e.x, e.y)));
            }
        }
        Ok(Self { width, height, entries })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn entries(&self) -> &[SparseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every valid pixel of a depth grid, conf 1.
    pub fn from_dense(d: &DepthGrid) -> Result<Self> {
        let entries = (0..d.height())
            .flat_map(|y| (0..d.width()).map(move |x| (x, y)))
            .filter(|&(x, y)| is_valid_depth(*d.get(x, y)))
            .map(|(x, y)| SparseEntry::new(x, y, *d.get(x, y)))
            .collect();
        Self::new(d.width(), d.height(), entries)
    }

    /// Scatter into a depth grid (0 elsewhere).
    pub fn to_grid(&self) -> DepthGrid {
        let mut g = Grid2D::filled(self.width, self.height, 0.0).expect("nonzero dims");
        for e in &self.entries {
            *g.get_mut(e.x, e.y) = e.depth;
        }
        g
    }

    /// Text form: `sparse_depth <w> <h> <n>` then one `x y depth conf` line
    /// per entry, reals at 9 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = format!("sparse_depth {} {} {}\n", self.width, self.height, self.entries.len());
        for e in &self.entries {
            writeln!(s, "{} {} {:.8e} {:.8e}", e.x, e.y, e.depth, e.conf).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("empty sparse depth file"))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 4 || h[0] != "sparse_depth" {
            return Err(Error::format(format!("bad sparse depth header {header:?}")));
        }
        let num = |t: &str| t.parse::<usize>().map_err(|_| Error::format(format!("bad integer {t:?}")));
        let (w, hgt, n) = (num(h[1])?, num(h[2])?, num(h[3])?);
        let mut entries = Vec::with_capacity(n);
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::format(format!("bad sparse entry line {line:?}")));
            }
            let real = |t: &str| t.parse::<f64>().map_err(|_| Error::format(format!("bad number {t:?}")));
            entries.push(SparseEntry::with_conf(num(f[0])?, num(f[1])?, real(f[2])?, real(f[3])?));
        }
        if entries.len() != n {
            return Err(Error::format(format!("header says {n} entries, found {}", entries.len())));
        }
        Self::new(w, hgt, entries)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMode {
    Uniform,
    #[default]
    Keypoint,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "keypoint" => Ok(Self::Keypoint),
            other => Err(Error::Config(format!("unknown sampler mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Corner responses must be strictly above this.
    pub response_threshold: f64,
    /// Pixels; a keypoint suppresses weaker ones at Euclidean distance <= this.
    pub nms_radius: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { response_threshold: 1e-4, nms_radius: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub max_samples: usize,
    pub rng_seed: u64,
    pub detector: DetectorConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { mode: SamplerMode::Keypoint, max_samples: 800, rng_seed: 0, detector: DetectorConfig::default() }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_samples < 1 {
            return Err(Error::Config("max_samples must be at least 1".into()));
        }
        if self.detector.nms_radius < 1 {
            return Err(Error::Config("nms_radius must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draws `max_samples` distinct valid pixels, each equally likely, without
/// replacement. Entries come back in row-major order.
pub fn sample_uniform(gt: &DepthGrid, cfg: &SamplerConfig) -> Result<SparseDepth> {
    cfg.validate()?;
    let valid: Vec<usize> = gt
        .data()
        .iter()
        .enumerate()
        .filter(|(_, d)| is_valid_depth(**d))
        .map(|(i, _)| i)
        .collect();
    if valid.len() < cfg.max_samples {
        return Err(Error::InsufficientPixels { needed: cfg.max_samples, available: valid.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, valid.len(), cfg.max_samples)
        .into_iter()
        .map(|k| valid[k])
        .collect();
    picked.sort_unstable();
    let w = gt.width();
    let entries = picked.into_iter().map(|i| SparseEntry::new(i % w, i / w, gt.data()[i])).collect();
    SparseDepth::new(gt.width(), gt.height(), entries)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: usize,
    pub y: usize,
    pub response: f64,
}

/// Luminance (Rec. 601 weights).
pub fn to_gray(img: &ColorGrid) -> Grid2D<f64> {
    img.map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
}

const HARRIS_K: f64 = 0.04;

/// Harris corner response `det(M) - 0.04 trace(M)^2` of the 3x3
/// Gaussian-weighted structure tensor of Sobel gradients. Borders replicate.
pub fn corner_response(img: &ColorGrid) -> Grid2D<f64> {
    let g = to_gray(img);
    let (w, h) = g.dims();
    let at = |x: i64, y: i64| *g.get(x.clamp(0, w as i64 - 1) as usize, y.clamp(0, h as i64 - 1) as usize);

    let mut tensor = vec![[0.0f64; 3]; w * h];
    tensor.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let y = y as i64;
        for (x, t) in row.iter_mut().enumerate() {
            let x = x as i64;
            // Sobel, scaled by 1/8 to give per-pixel derivatives
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1))
                / 8.0;
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1))
                / 8.0;
            *t = [gx * gx, gy * gy, gx * gy];
        }
    });

    const GAUSS: [f64; 3] = [0.25, 0.5, 0.25];
    let mut resp = vec![0.0; w * h];
    resp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, r) in row.iter_mut().enumerate() {
            let mut m = [0.0; 3];
            for (j, gy) in GAUSS.iter().enumerate() {
                let sy = (y as i64 + j as i64 - 1).clamp(0, h as i64 - 1) as usize;
                for (i, gx) in GAUSS.iter().enumerate() {
                    let sx = (x as i64 + i as i64 - 1).clamp(0, w as i64 - 1) as usize;
                    let t = &tensor[sy * w + sx];
                    for c in 0..3 {
                        m[c] += gx * gy * t[c];
                    }
                }
            }
            let det = m[0] * m[1] - m[2] * m[2];
            let tr = m[0] + m[1];
            *r = det - HARRIS_K * tr * tr;
        }
    });
    Grid2D::from_vec(w, h, resp).expect("dims preserved")
}

/// Greedy suppression: candidates are taken strongest first (ties in row-major
/// order) and each kept point removes every other candidate within `radius`.
pub fn non_max_suppress(mut candidates: Vec<Keypoint>, radius: usize, width: usize, height: usize) -> Vec<Keypoint> {
    candidates.sort_by(|a, b| b.response.total_cmp(&a.response).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    let mut blocked = vec![false; width * height];
    let r = radius as i64;
    let mut kept = Vec::new();
    for c in candidates {
        if blocked[c.y * width + c.x] {
            continue;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (nx, ny) = (c.x as i64 + dx, c.y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < width as i64 && ny < height as i64 {
                    blocked[ny as usize * width + nx as usize] = true;
                }
            }
        }
        kept.push(c);
    }
    kept
}

fn detect_all(img: &ColorGrid, cfg: &SamplerConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let (w, h) = img.dims();
    if w < 8 || h < 8 {
        return Err(Error::Dimensions(format!("keypoint detection needs at least 8x8, got {w}x{h}")));
    }
    let resp = corner_response(img);
    let mut cands = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let r = *resp.get(x, y);
            if !(r > cfg.detector.response_threshold) {
                continue;
            }
            let mut is_max = true;
            'n: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                for nx in x.saturating_sub(1)..(x + 2).min(w) {
                    if *resp.get(nx, ny) > r {
                        is_max = false;
                        break 'n;
                    }
                }
            }
            if is_max {
                cands.push(Keypoint { x, y, response: r });
            }
        }
    }
    Ok(non_max_suppress(cands, cfg.detector.nms_radius, w, h))
}

/// Corner keypoints, strongest first, at most `max_samples`.
pub fn detect_keypoints(img: &ColorGrid, cfg: &SamplerConfig) -> Result<Vec<Keypoint>> {
    let mut kps = detect_all(img, cfg)?;
    kps.truncate(cfg.max_samples);
    Ok(kps)
}

/// Depth read at detected keypoints. Keypoints on invalid depth are skipped and
/// the strongest `max_samples` of the rest are kept.
pub fn sample_keypoints(gt: &DepthGrid, img: &ColorGrid, cfg: &SamplerConfig) -> Result<SparseDepth> {
    gt.expect_dims("ground-truth depth", img.width(), img.height())?;
    let entries = detect_all(img, cfg)?
        .into_iter()
        .filter(|k| is_valid_depth(*gt.get(k.x, k.y)))
        .take(cfg.max_samples)
        .map(|k| SparseEntry::new(k.x, k.y, *gt.get(k.x, k.y)))
        .collect();
    SparseDepth::new(gt.width(), gt.height(), entries)
}

/// Dispatches on `cfg.mode`.
pub fn sample(gt: &DepthGrid, img: &ColorGrid, cfg: &SamplerConfig) -> Result<SparseDepth> {
    match cfg.mode {
        SamplerMode::Uniform => sample_uniform(gt, cfg),
        SamplerMode::Keypoint => sample_keypoints(gt, img, cfg),
    }
}

fn pixel_points(s: &SparseDepth) -> Vec<[f64; 3]> {
    s.entries().iter().map(|e| [e.x as f64, e.y as f64, 0.0]).collect()
}

fn fraction_covered(queries: &[[f64; 3]], index: &PointIndex, radius: f64) -> f64 {
    let hit = queries.iter().filter(|q| index.any_within(**q, radius)).count();
    hit as f64 / queries.len() as f64
}

/// `(precision, recall)`: the fraction of candidate points within `radius` of
/// some reference point, and the fraction of reference points within `radius`
/// of some candidate point.
pub fn distribution_pr(candidate: &SparseDepth, reference: &SparseDepth, radius: f64) -> Result<(f64, f64)> {
    if (candidate.width(), candidate.height()) != (reference.width(), reference.height()) {
        return Err(Error::DimensionMismatch {
            what: "candidate samples",
            got_w: candidate.width(),
            got_h: candidate.height(),
            want_w: reference.width(),
            want_h: reference.height(),
        });
    }
    if candidate.is_empty() {
        return Err(Error::Empty("candidate sample set"));
    }
    if reference.is_empty() {
        return Err(Error::Empty("reference sample set"));
    }
    if !(radius >= 0.0) {
        return Err(Error::invalid("radius must be nonnegative"));
    }
    let (c, r) = (pixel_points(candidate), pixel_points(reference));
    let cell = radius.max(1.0);
    let precision = fraction_covered(&c, &PointIndex::new(&r, cell), radius);
    let recall = fraction_covered(&r, &PointIndex::new(&c, cell), radius);
    Ok((precision, recall))
}
