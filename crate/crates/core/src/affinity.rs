//! Per-pixel neighbor affinities and confidences.
//!
//! Raw weights are normalized by their absolute sum (never scaled up), and
//! the remaining mass goes to the center: `w_k = raw_k / max(sum|raw|, 1)`,
//! `wc = 1 - sum w_k`. With nonnegative raw weights every row is then a convex
//! combination, which is what keeps propagation stable.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{ColorGrid, ConfidenceGrid, Grid2D, NormalGrid};
use crate::propagation::KernelSpec;
use crate::pyramid::{self, PyramidConfig};
use crate::sampling::SparseDepth;

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    width: usize,
    height: usize,
    kernel: KernelSpec,
    neighbor: Vec<f64>,
    center: Vec<f64>,
}

impl AffinityField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    /// All neighbor weights, `kernel.len()` per pixel in row-major pixel order.
    pub fn neighbor_weights(&self) -> &[f64] {
        &self.neighbor
    }

    pub fn center_weights(&self) -> &[f64] {
        &self.center
    }

    /// `(neighbor weights, center weight)` at one pixel.
    pub fn at(&self, x: usize, y: usize) -> (&[f64], f64) {
        let i = y * self.width + x;
        let k = self.kernel.len();
        (&self.neighbor[i * k..(i + 1) * k], self.center[i])
    }

    pub(crate) fn expect_dims(&self, width: usize, height: usize) -> Result<()> {
        if (self.width, self.height) != (width, height) {
            return Err(Error::DimensionMismatch {
                what: "affinity field",
                got_w: self.width,
                got_h: self.height,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }
}

fn out_of_bounds(x: usize, y: usize, (dx, dy): (i32, i32), w: usize, h: usize) -> bool {
    let nx = x as i64 + dx as i64;
    let ny = y as i64 + dy as i64;
    nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64
}

/// Normalizes raw per-pixel neighbor weights (`kernel.len()` per pixel,
/// row-major). Neighbors that fall outside the grid are zeroed first.
pub fn normalize_affinity(width: usize, height: usize, kernel: &KernelSpec, mut raw: Vec<f64>) -> Result<AffinityField> {
    let k = kernel.len();
    if width == 0 || height == 0 || raw.len() != width * height * k {
        return Err(Error::Dimensions(format!(
            "{} raw weights for {width}x{height} pixels x {k} neighbors",
            raw.len()
        )));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite raw affinity {v}")));
    }
    let offsets = kernel.effective_offsets();
    let mut center = vec![0.0; width * height];
    raw.par_chunks_mut(width * k)
        .zip(center.par_chunks_mut(width))
        .enumerate()
        .for_each(|(y, (row, crow))| {
            for (x, (px, c)) in row.chunks_exact_mut(k).zip(crow.iter_mut()).enumerate() {
                for (v, &o) in px.iter_mut().zip(&offsets) {
                    if out_of_bounds(x, y, o, width, height) {
                        *v = 0.0;
                    }
                }
                let abs_sum: f64 = px.iter().map(|v| v.abs()).sum();
                let scale = abs_sum.max(1.0);
                for v in px.iter_mut() {
                    *v /= scale;
                }
                *c = 1.0 - px.iter().sum::<f64>();
            }
        });
    Ok(AffinityField { width, height, kernel: kernel.clone(), neighbor: raw, center })
}

/// Parameters of the hand-crafted bilateral affinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilateralParams {
    pub sigma_color: f64,
    /// Radians.
    pub sigma_normal: f64,
    pub center_bias: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self { sigma_color: 0.1, sigma_normal: 0.3, center_bias: 0.5 }
    }
}

impl BilateralParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_color > 0.0 && self.sigma_normal > 0.0) || !self.sigma_color.is_finite() || !self.sigma_normal.is_finite() {
            return Err(Error::invalid(format!("bilateral sigmas must be positive: {self:?}")));
        }
        if !(self.center_bias >= 0.0) || !self.center_bias.is_finite() {
            return Err(Error::invalid(format!("center bias must be >= 0: {self:?}")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.sigma_color, self.sigma_normal, self.center_bias]
    }

    fn from_array(a: [f64; 3]) -> Self {
        Self { sigma_color: a[0], sigma_normal: a[1], center_bias: a[2] }
    }
}

#[inline]
fn angle_between(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    dot.clamp(-1.0, 1.0).acos()
}

/// Unnormalized bilateral weight between two pixels.
#[inline]
pub fn bilateral_raw(ci: &[f64; 3], ck: &[f64; 3], ni: &[f64; 3], nk: &[f64; 3], p: &BilateralParams) -> f64 {
    let dc = (ci[0] - ck[0]).powi(2) + (ci[1] - ck[1]).powi(2) + (ci[2] - ck[2]).powi(2);
    let ang = angle_between(ni, nk);
    (-dc / (p.sigma_color * p.sigma_color) - ang * ang / (p.sigma_normal * p.sigma_normal)).exp() / (1.0 + p.center_bias)
}

/// Color- and normal-guided affinity, normalized.
pub fn bilateral_affinity(img: &ColorGrid, normals: &NormalGrid, kernel: &KernelSpec, p: &BilateralParams) -> Result<AffinityField> {
    normals.expect_dims("normals", img.width(), img.height())?;
    bilateral_affinity_unchecked(img, normals, kernel, p)
}

fn bilateral_affinity_unchecked(img: &ColorGrid, normals: &NormalGrid, kernel: &KernelSpec, p: &BilateralParams) -> Result<AffinityField> {
    let (w, h) = img.dims();
    let k = kernel.len();
    let offsets = kernel.effective_offsets();
    let mut raw = vec![0.0; w * h * k];
    raw.par_chunks_mut(w * k).enumerate().for_each(|(y, row)| {
        for (x, px) in row.chunks_exact_mut(k).enumerate() {
            let (ci, ni) = (img.get(x, y), normals.get(x, y));
            for (v, &(dx, dy)) in px.iter_mut().zip(&offsets) {
                if out_of_bounds(x, y, (dx, dy), w, h) {
                    continue;
                }
                let nx = (x as i64 + dx as i64) as usize;
                let ny = (y as i64 + dy as i64) as usize;
                *v = bilateral_raw(ci, img.get(nx, ny), ni, normals.get(nx, ny), p);
            }
        }
    });
    normalize_affinity(w, h, kernel, raw)
}

/// Input confidences pass through; every pixel gets confidence 1.
pub fn default_confidence(sparse: &SparseDepth, img: &ColorGrid) -> Result<(ConfidenceGrid, Vec<f64>)> {
    if (sparse.width(), sparse.height()) != img.dims() {
        return Err(Error::DimensionMismatch {
            what: "sparse depth",
            got_w: sparse.width(),
            got_h: sparse.height(),
            want_w: img.width(),
            want_h: img.height(),
        });
    }
    let grid = Grid2D::filled(img.width(), img.height(), 1.0)?;
    Ok((grid, sparse.entries().iter().map(|e| e.conf).collect()))
}

/// Source of per-scale affinities and pixel confidences.
pub trait AffinityProvider: Sync {
    fn affinity(&self, color: &ColorGrid, normals: &NormalGrid, kernel: &KernelSpec) -> Result<AffinityField>;

    fn pixel_confidence(&self, sparse: &SparseDepth, color: &ColorGrid) -> Result<ConfidenceGrid> {
        Ok(default_confidence(sparse, color)?.0)
    }
}

impl AffinityProvider for BilateralParams {
    fn affinity(&self, color: &ColorGrid, normals: &NormalGrid, kernel: &KernelSpec) -> Result<AffinityField> {
        self.validate()?;
        bilateral_affinity(color, normals, kernel, self)
    }
}

/// Equal raw weight for every in-bounds neighbor, ignoring the image.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformAffinity;

impl AffinityProvider for UniformAffinity {
    fn affinity(&self, color: &ColorGrid, _normals: &NormalGrid, kernel: &KernelSpec) -> Result<AffinityField> {
        let (w, h) = color.dims();
        normalize_affinity(w, h, kernel, vec![1.0; w * h * kernel.len()])
    }
}

/// Everything the parameter fit needs about one scene.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub color: ColorGrid,
    pub normals: NormalGrid,
    pub sparse: SparseDepth,
    pub gt: crate::grids::DepthGrid,
    pub mode: crate::propagation::PropagationMode,
}

/// Multi-scale loss of the full coarse-to-fine run under `params`.
pub fn bilateral_loss(scene: &TrainingScene, cfg: &PyramidConfig, params: &BilateralParams) -> Result<f64> {
    let inputs = pyramid::FullResInputs {
        color: &scene.color,
        normals: &scene.normals,
        sparse: &scene.sparse,
        gt: Some(&scene.gt),
    };
    let bundle = pyramid::build_scale_bundle(&inputs, cfg, &RawBilateral(*params))?;
    let preds = pyramid::run_coarse_to_fine(&bundle, cfg, scene.mode)?;
    let loss = pyramid::multiscale_loss(&preds, &bundle.gt_pyramid()?, cfg)?;
    if !loss.is_finite() {
        return Err(Error::invalid(format!("loss is {loss} at {params:?}")));
    }
    Ok(loss)
}

/// Bilateral provider without the parameter-domain check, so finite
/// differences may step slightly past a boundary.
struct RawBilateral(BilateralParams);

impl AffinityProvider for RawBilateral {
    fn affinity(&self, color: &ColorGrid, normals: &NormalGrid, kernel: &KernelSpec) -> Result<AffinityField> {
        bilateral_affinity(color, normals, kernel, &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difference {
    Forward,
    Central,
}

/// Finite-difference gradient of [`bilateral_loss`] with per-coordinate step
/// `rel_step * max(|p_i|, 1)`.
pub fn loss_gradient(
    scene: &TrainingScene,
    cfg: &PyramidConfig,
    params: &BilateralParams,
    rel_step: f64,
    scheme: Difference,
) -> Result<[f64; 3]> {
    let base = params.as_array();
    let f0 = match scheme {
        Difference::Forward => Some(bilateral_loss(scene, cfg, params)?),
        Difference::Central => None,
    };
    let mut grad = [0.0; 3];
    for i in 0..3 {
        let h = rel_step * base[i].abs().max(1.0);
        let mut plus = base;
        plus[i] += h;
        let fp = bilateral_loss(scene, cfg, &BilateralParams::from_array(plus))?;
        grad[i] = match f0 {
            Some(f0) => (fp - f0) / h,
            None => {
                let mut minus = base;
                minus[i] -= h;
                let fm = bilateral_loss(scene, cfg, &BilateralParams::from_array(minus))?;
                (fp - fm) / (2.0 * h)
            }
        };
    }
    Ok(grad)
}

const MIN_SIGMA: f64 = 1e-3;
const MAX_HALVINGS: usize = 12;

fn project(a: [f64; 3]) -> [f64; 3] {
    [a[0].max(MIN_SIGMA), a[1].max(MIN_SIGMA), a[2].max(0.0)]
}

/// Guarded gradient descent on the three bilateral parameters.
///
/// Each step tries `p - lr * g` and halves the step until the loss does not
/// increase; if no halving helps the parameters stay put. The returned loss is
/// therefore never above the starting loss.
pub fn fit_bilateral_params(
    scene: &TrainingScene,
    cfg: &PyramidConfig,
    start: BilateralParams,
    steps: usize,
    lr: f64,
) -> Result<(BilateralParams, Vec<f64>)> {
    start.validate()?;
    let mut p = start;
    let mut loss = bilateral_loss(scene, cfg, &p)?;
    let mut history = vec![loss];
    for _ in 0..steps {
        let g = loss_gradient(scene, cfg, &p, 1e-6, Difference::Central)?;
        let mut step = lr;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand = project(std::array::from_fn(|i| p.as_array()[i] - step * g[i]));
            let cand = BilateralParams::from_array(cand);
            let l = bilateral_loss(scene, cfg, &cand)?;
            if l <= loss {
                accepted = Some((cand, l));
                break;
            }
            step *= 0.5;
        }
        if let Some((cand, l)) = accepted {
            p = cand;
            loss = l;
        }
        history.push(loss);
    }
    Ok((p, history))
}

const DUMP_MAGIC: &[u8; 4] = b"AFF1";

/// Binary dump: magic `AFF1`, then little-endian u32 width, height, K,
/// kernel id (0 = 3x3 ring, 1 = custom) and dilation, K pairs of i32 offsets,
/// and per pixel K neighbor weights followed by the center weight as f32.
pub fn write_affinity(path: impl AsRef<Path>, a: &AffinityField) -> Result<()> {
    let k = a.kernel.len();
    let mut buf = Vec::with_capacity(24 + 8 * k + a.center.len() * (k + 1) * 4);
    buf.write_all(DUMP_MAGIC)?;
    let kernel_id = if a.kernel.is_ring3x3() { 0u32 } else { 1 };
    for v in [a.width as u32, a.height as u32, k as u32, kernel_id, a.kernel.dilation()] {
        buf.write_all(&v.to_le_bytes())?;
    }
    for &(dx, dy) in a.kernel.offsets() {
        buf.write_all(&dx.to_le_bytes())?;
        buf.write_all(&dy.to_le_bytes())?;
    }
    for (px, c) in a.neighbor.chunks_exact(k).zip(&a.center) {
        for v in px.iter().chain(std::iter::once(c)) {
            buf.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_affinity(path: impl AsRef<Path>) -> Result<AffinityField> {
    let bytes = fs::read(path)?;
    let mut words = bytes.get(4..).unwrap_or(&[]).chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    if bytes.len() < 24 || &bytes[..4] != DUMP_MAGIC {
        return Err(Error::format("not an affinity dump"));
    }
    let mut next_u32 = || words.next().map(u32::from_le_bytes).ok_or_else(|| Error::format("truncated affinity dump"));
    let (w, h, k, kernel_id, dilation) = (next_u32()? as usize, next_u32()? as usize, next_u32()? as usize, next_u32()?, next_u32()?);
    let header = 24 + 8 * k;
    if bytes.len() != header + w * h * (k + 1) * 4 {
        return Err(Error::format("affinity dump size does not match header"));
    }
    let offsets: Vec<(i32, i32)> = bytes[24..header]
        .chunks_exact(8)
        .map(|c| (i32::from_le_bytes([c[0], c[1], c[2], c[3]]), i32::from_le_bytes([c[4], c[5], c[6], c[7]])))
        .collect();
    let kernel = KernelSpec::new(offsets, dilation, 0)?;
    if (kernel_id == 0) != kernel.is_ring3x3() {
        return Err(Error::format("kernel id does not match stored offsets"));
    }
    let floats: Vec<f64> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut neighbor = Vec::with_capacity(w * h * k);
    let mut center = Vec::with_capacity(w * h);
    for px in floats.chunks_exact(k + 1) {
        neighbor.extend_from_slice(&px[..k]);
        center.push(px[k]);
    }
    Ok(AffinityField { width: w, height: h, kernel, neighbor, center })
}
