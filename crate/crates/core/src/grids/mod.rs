//! Raster containers and the resampling shared by the rest of the crate.
//!
//! All grids are row-major. Depth uses `0.0` as the "no data" sentinel, and
//! every consumer treats it that way.

mod distance;
pub mod io;

pub use distance::distance_to_nearest;

use crate::error::{Error, Result};

/// A dense row-major raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<V> {
    width: usize,
    height: usize,
    data: Vec<V>,
}

/// Per-pixel depth in meters, `0.0` = invalid.
pub type DepthGrid = Grid2D<f64>;
/// Per-pixel RGB with channels in `[0, 1]`.
pub type ColorGrid = Grid2D<[f64; 3]>;
/// Per-pixel unit surface normal.
pub type NormalGrid = Grid2D<[f64; 3]>;
/// Per-pixel confidence in `[0, 1]`.
pub type ConfidenceGrid = Grid2D<f64>;

impl<V: Clone> Grid2D<V> {
    pub fn filled(width: usize, height: usize, value: V) -> Result<Self> {
        check_dims(width, height)?;
        Ok(Self { width, height, data: vec![value; width * height] })
    }
}

impl<V> Grid2D<V> {
    pub fn from_vec(width: usize, height: usize, data: Vec<V>) -> Result<Self> {
        check_dims(width, height)?;
        if data.len() != width * height {
            return Err(Error::Dimensions(format!(
                "{} values for a {width}x{height} grid",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> V) -> Result<Self> {
        check_dims(width, height)?;
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &V {
        &self.data[self.index(x, y)]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut V {
        let i = self.index(x, y);
        &mut self.data[i]
    }

    #[inline]
    pub fn data(&self) -> &[V] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<V> {
        self.data
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, V> {
        self.data.chunks_exact(self.width)
    }

    pub fn map<U>(&self, f: impl FnMut(&V) -> U) -> Grid2D<U> {
        Grid2D {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid2D<U>) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn expect_dims(&self, what: &'static str, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch {
                what,
                got_w: self.width,
                got_h: self.height,
                want_w: width,
                want_h: height,
            });
        }
        Ok(())
    }
}

fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::Dimensions(format!("{width}x{height} grid is empty")));
    }
    Ok(())
}

/// `true` when a depth value carries data.
#[inline]
pub fn is_valid_depth(d: f64) -> bool {
    d > 0.0
}

/// Checks the depth invariant: finite and non-negative everywhere.
pub fn validate_depth(g: &DepthGrid) -> Result<()> {
    match g.data().iter().position(|d| !d.is_finite() || *d < 0.0) {
        Some(i) => Err(Error::invalid(format!(
            "depth at ({}, {}) is {}",
            i % g.width(),
            i / g.width(),
            g.data()[i]
        ))),
        None => Ok(()),
    }
}

pub fn validate_confidence(g: &ConfidenceGrid) -> Result<()> {
    match g.data().iter().position(|c| !(0.0..=1.0).contains(c)) {
        Some(i) => Err(Error::invalid(format!("confidence {} outside [0, 1]", g.data()[i]))),
        None => Ok(()),
    }
}

pub fn validate_color(g: &ColorGrid) -> Result<()> {
    let bad = g.data().iter().flatten().find(|c| !(0.0..=1.0).contains(*c));
    match bad {
        Some(c) => Err(Error::invalid(format!("color channel {c} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn validate_normals(g: &NormalGrid) -> Result<()> {
    for n in g.data() {
        let len = norm3(n);
        if !len.is_finite() || (len - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("normal {n:?} has length {len}")));
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Values that can be averaged over a pixel block.
pub trait BlockMean: Copy {
    fn block_mean(values: &[Self]) -> Self;
}

impl BlockMean for f64 {
    fn block_mean(values: &[Self]) -> Self {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

impl BlockMean for [f64; 3] {
    fn block_mean(values: &[Self]) -> Self {
        let n = values.len() as f64;
        let mut acc = [0.0; 3];
        for v in values {
            for c in 0..3 {
                acc[c] += v[c];
            }
        }
        acc.map(|a| a / n)
    }
}

fn downsample_with<V: Copy, U>(
    g: &Grid2D<V>,
    mut reduce: impl FnMut(&[V]) -> U,
) -> Result<Grid2D<U>> {
    if g.width < 2 || g.height < 2 {
        return Err(Error::Dimensions(format!(
            "cannot halve a {}x{} grid",
            g.width, g.height
        )));
    }
    let (w, h) = (g.width.div_ceil(2), g.height.div_ceil(2));
    let mut block = Vec::with_capacity(4);
    Grid2D::from_fn(w, h, |x, y| {
        block.clear();
        for sy in 2 * y..(2 * y + 2).min(g.height) {
            for sx in 2 * x..(2 * x + 2).min(g.width) {
                block.push(*g.get(sx, sy));
            }
        }
        reduce(&block)
    })
}

/// Halves each dimension (rounding up) by averaging 2x2 blocks; boundary
/// blocks average whatever pixels they cover.
pub fn downsample_by_2<V: BlockMean>(g: &Grid2D<V>) -> Result<Grid2D<V>> {
    downsample_with(g, V::block_mean)
}

/// Like [`downsample_by_2`] but invalid depth is left out of each mean. A block
/// with no valid pixel stays invalid.
pub fn downsample_depth_by_2(g: &DepthGrid) -> Result<DepthGrid> {
    downsample_with(g, |block| {
        let (sum, n) = block
            .iter()
            .filter(|d| is_valid_depth(**d))
            .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    })
}

/// Block-mean of normals, renormalized to unit length.
pub fn downsample_normals_by_2(g: &NormalGrid) -> Result<NormalGrid> {
    downsample_with(g, |block| {
        let m = <[f64; 3]>::block_mean(block);
        let len = norm3(&m);
        if len > 1e-12 {
            m.map(|c| c / len)
        } else {
            block[0]
        }
    })
}

/// Source coordinate of output sample `i` under the half-pixel-center
/// convention with a fixed factor of 2.
#[inline]
pub(crate) fn half_pixel_source(i: usize) -> f64 {
    (i as f64 + 0.5) / 2.0 - 0.5
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear 2x upsampling with half-pixel-centered alignment and edge clamping.
///
/// The target may be one pixel short of exact doubling on either axis, which is
/// what halving an odd dimension produces.
pub fn upsample_bilinear_by_2(g: &DepthGrid, target_w: usize, target_h: usize) -> Result<DepthGrid> {
    let ok = |src: usize, dst: usize| dst + 1 >= 2 * src && dst <= 2 * src;
    if !ok(g.width, target_w) || !ok(g.height, target_h) {
        return Err(Error::Dimensions(format!(
            "{target_w}x{target_h} is not a 2x upsampling of {}x{}",
            g.width, g.height
        )));
    }
    let taps = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        (0..n_dst)
            .map(|i| {
                let s = half_pixel_source(i).clamp(0.0, (n_src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(g.width, target_w);
    let ys = taps(g.height, target_h);
    Grid2D::from_fn(target_w, target_h, |x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let top = lerp(*g.get(x0, y0), *g.get(x1, y0), fx);
        let bottom = lerp(*g.get(x0, y1), *g.get(x1, y1), fx);
        lerp(top, bottom, fy)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_dims() {
        assert!(Grid2D::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Grid2D::<f64>::filled(0, 3, 0.0).is_err());
    }

    #[test]
    fn constant_block_mean() {
        let g = Grid2D::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let d = downsample_by_2(&g).unwrap();
        assert_eq!(d.dims(), (1, 1));
        assert_eq!(d.data(), &[1.0]);
    }

    #[test]
    fn depth_mean_skips_invalid() {
        let g = Grid2D::from_vec(2, 2, vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample_depth_by_2(&g).unwrap().data(), &[4.0]);
        let g = Grid2D::from_vec(2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(downsample_depth_by_2(&g).unwrap().data(), &[0.0]);
    }

    #[test]
    fn downsample_needs_two_pixels() {
        let g = Grid2D::from_vec(1, 4, vec![1.0; 4]).unwrap();
        assert!(matches!(downsample_by_2(&g), Err(Error::Dimensions(_))));
    }

    #[test]
    fn random_block_mean_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (6, 4);
        let g = Grid2D::from_fn(w, h, |_, _| rng.gen_range(0.0..10.0)).unwrap();
        let d = downsample_by_2(&g).unwrap();
        assert_eq!(d.dims(), (3, 2));
        for oy in 0..2 {
            for ox in 0..3 {
                let mut s = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += g.get(2 * ox + dx, 2 * oy + dy);
                    }
                }
                assert!((d.get(ox, oy) - s / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn odd_dims_use_partial_blocks() {
        let g = Grid2D::from_fn(3, 3, |x, y| (x + 3 * y) as f64).unwrap();
        let d = downsample_by_2(&g).unwrap();
        assert_eq!(d.dims(), (2, 2));
        assert_eq!(*d.get(1, 0), (2.0 + 5.0) / 2.0);
        assert_eq!(*d.get(0, 1), (6.0 + 7.0) / 2.0);
        assert_eq!(*d.get(1, 1), 8.0);
    }

    #[test]
    fn upsample_constant() {
        let g = Grid2D::from_vec(1, 1, vec![5.0]).unwrap();
        let u = upsample_bilinear_by_2(&g, 2, 2).unwrap();
        assert_eq!(u.data(), &[5.0; 4]);
    }

    #[test]
    fn upsample_ramp_matches_closed_form() {
        // Half-pixel centers: output i samples source (i + 0.5) / 2 - 0.5,
        // clamped to [0, 1]: -0.25, 0.25, 0.75, 1.25 -> 0, 0.25, 0.75, 1.
        let g = Grid2D::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let u = upsample_bilinear_by_2(&g, 4, 1).unwrap();
        assert_eq!(u.data(), &[0.0, 0.5, 1.5, 2.0]);
        // Mean of the output equals the mean of the source.
        let mean: f64 = u.data().iter().sum::<f64>() / 4.0;
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn upsample_rejects_wrong_target() {
        let g = Grid2D::from_vec(3, 3, vec![1.0; 9]).unwrap();
        assert!(upsample_bilinear_by_2(&g, 7, 6).is_err());
        assert!(upsample_bilinear_by_2(&g, 4, 6).is_err());
        assert!(upsample_bilinear_by_2(&g, 5, 6).is_ok());
    }

    #[test]
    fn constant_round_trip_is_exact() {
        for (w, h) in [(7, 5), (8, 8), (2, 9)] {
            let g = Grid2D::filled(w, h, 1.7).unwrap();
            let d = downsample_depth_by_2(&g).unwrap();
            let u = upsample_bilinear_by_2(&d, w, h).unwrap();
            assert_eq!(u, g);
        }
    }

    #[test]
    fn normals_stay_unit() {
        let g = Grid2D::from_fn(4, 4, |x, _| {
            let a = x as f64 * 0.3;
            [a.sin(), 0.0, -a.cos()]
        })
        .unwrap();
        validate_normals(&downsample_normals_by_2(&g).unwrap()).unwrap();
    }
}
