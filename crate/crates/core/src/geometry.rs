//! Pinhole cameras, depth/point conversion and multi-view depth fusion.
//!
//! Camera frame: x right, y down, z forward. Pixel `(x, y)` addresses the pixel
//! center, so a projection lands on the nearest pixel by rounding.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grids::{is_valid_depth, DepthGrid, Grid2D};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Pinhole intrinsics plus a world-to-camera rigid transform
/// `X_cam = R * X_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let k = intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) || ![k.fx, k.fy, k.cx, k.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("bad intrinsics {k:?}")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9) || (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("rotation is not proper orthonormal (|RtR - I| = {ortho:e}, det = {det})")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self { intrinsics, rotation, translation })
    }

    pub fn identity(intrinsics: Intrinsics) -> Result<Self> {
        Self::new(intrinsics, Matrix3::identity(), Vector3::zeros())
    }

    /// Camera at `eye` looking at `target`, with image-up roughly along `up`.
    pub fn look_at(intrinsics: Intrinsics, eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("eye equals target"))?;
        let x = (-up).cross(&z).try_normalize(1e-12).ok_or_else(|| Error::invalid("up is parallel to the view direction"))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye.coords);
        Self::new(intrinsics, rotation, translation)
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Direction of the pixel ray in camera coordinates, scaled to unit z.
    #[inline]
    pub fn ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0)
    }

    #[inline]
    pub fn to_camera(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    #[inline]
    pub fn to_world(&self, c: &Vector3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (c - self.translation))
    }

    /// Sixteen numbers: `fx fy cx cy r11 .. r33 t1 t2 t3`.
    pub fn to_line(&self) -> String {
        let k = &self.intrinsics;
        let mut s = format!("{} {} {} {}", k.fx, k.fy, k.cx, k.cy);
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {}", self.rotation[(r, c)]).unwrap();
            }
        }
        for v in self.translation.iter() {
            write!(s, " {v}").unwrap();
        }
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let v = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::format(format!("bad camera number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 16 {
            return Err(Error::format(format!("camera line has {} numbers, expected 16", v.len())));
        }
        let k = Intrinsics { fx: v[0], fy: v[1], cx: v[2], cy: v[3] };
        let r = Matrix3::from_row_slice(&v[4..13]);
        Self::new(k, r, Vector3::new(v[13], v[14], v[15]))
    }
}

/// World point seen at pixel `(x, y)` with camera-frame depth `depth`.
pub fn backproject(view: &CameraView, x: f64, y: f64, depth: f64) -> Result<Point3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("backprojection depth must be positive, got {depth}")));
    }
    Ok(view.to_world(&(view.ray(x, y) * depth)))
}

/// Continuous pixel coordinates and camera-frame depth of a world point.
pub fn project(view: &CameraView, p: &Point3<f64>) -> Result<(f64, f64, f64)> {
    let c = view.to_camera(p);
    if !(c.z > 0.0) {
        return Err(Error::BehindCamera(c.z));
    }
    let k = &view.intrinsics;
    Ok((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
}

/// Nearest pixel of a projection inside a `width x height` frame.
pub fn project_to_pixel(view: &CameraView, p: &Point3<f64>, width: usize, height: usize) -> Result<(usize, usize, f64)> {
    let (u, v, z) = project(view, p)?;
    let (px, py) = (u.round(), v.round());
    if !(px >= 0.0 && py >= 0.0 && px < width as f64 && py < height as f64) {
        return Err(Error::OutOfFrame { x: u, y: v, width, height });
    }
    Ok((px as usize, py as usize, z))
}

/// Every valid pixel of a depth map as a world point, row-major.
pub fn depth_to_points(view: &CameraView, depth: &DepthGrid) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = *depth.get(x, y);
            if is_valid_depth(d) {
                let p = view.to_world(&(view.ray(x as f64, y as f64) * d));
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points.iter().find(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid(format!("non-finite point {p:?}")));
        }
        Ok(Self { points, colors: None })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with float `x y z` and, when present, uchar `red green blue`.
    pub fn to_ply(&self) -> String {
        let mut s = String::with_capacity(64 + self.points.len() * 40);
        s.push_str("ply\nformat ascii 1.0\n");
        writeln!(s, "element vertex {}", self.points.len()).unwrap();
        s.push_str("property float x\nproperty float y\nproperty float z\n");
        if self.colors.is_some() {
            s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
        }
        s.push_str("end_header\n");
        for (i, p) in self.points.iter().enumerate() {
            write!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
            if let Some(c) = &self.colors {
                write!(s, " {} {} {}", c[i][0], c[i][1], c[i][2]).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_ply(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(Error::format("missing ply magic"));
        }
        let mut count = None;
        let mut props = Vec::new();
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| Error::format("PLY header not terminated"))?.trim();
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["format", "ascii", _] => {}
                ["format", other, ..] => return Err(Error::format(format!("unsupported PLY format {other}"))),
                ["comment", ..] | ["obj_info", ..] => {}
                ["element", name, n] => {
                    in_vertex = *name == "vertex";
                    if in_vertex {
                        count = Some(n.parse::<usize>().map_err(|_| Error::format("bad vertex count"))?);
                    }
                }
                ["property", _, name] if in_vertex => props.push(name.to_string()),
                ["property", ..] => {}
                ["end_header"] => break,
                _ => return Err(Error::format(format!("unexpected PLY header line {line:?}"))),
            }
        }
        let n = count.ok_or_else(|| Error::format("PLY has no vertex element"))?;
        let pos = |name: &str| props.iter().position(|p| p == name);
        let (ix, iy, iz) = match (pos("x"), pos("y"), pos("z")) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(Error::format("PLY vertex lacks x/y/z")),
        };
        let rgb = match (pos("red"), pos("green"), pos("blue")) {
            (Some(r), Some(g), Some(b)) => Some((r, g, b)),
            _ => None,
        };
        let mut points = Vec::with_capacity(n);
        let mut colors = rgb.map(|_| Vec::with_capacity(n));
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| Error::format("PLY has fewer vertices than declared"))?;
            let v: Vec<&str> = line.split_whitespace().collect();
            if v.len() != props.len() {
                return Err(Error::format(format!("PLY vertex line {line:?} has {} fields", v.len())));
            }
            let num = |i: usize| v[i].parse::<f64>().map_err(|_| Error::format(format!("bad PLY value {:?}", v[i])));
            points.push([num(ix)?, num(iy)?, num(iz)?]);
            if let (Some((r, g, b)), Some(c)) = (rgb, colors.as_mut()) {
                let byte = |i: usize| v[i].parse::<u8>().map_err(|_| Error::format(format!("bad PLY color {:?}", v[i])));
                c.push([byte(r)?, byte(g)?, byte(b)?]);
            }
        }
        let mut cloud = Self::new(points)?;
        cloud.colors = colors;
        Ok(cloud)
    }

    pub fn write_ply(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_ply())?;
        Ok(())
    }

    pub fn read_ply(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_ply(&fs::read_to_string(path)?)
    }
}

pub fn write_cameras(path: impl AsRef<Path>, views: &[CameraView]) -> Result<()> {
    let mut s = String::new();
    for v in views {
        s.push_str(&v.to_line());
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_cameras(path: impl AsRef<Path>) -> Result<Vec<CameraView>> {
    fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(CameraView::from_line)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Meters.
    pub depth_threshold: f64,
    /// Views agreeing on a point, the reference view included.
    pub min_consistent_views: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { depth_threshold: 0.1, min_consistent_views: 2 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_threshold > 0.0) {
            return Err(Error::Config("depth threshold must be positive".into()));
        }
        if self.min_consistent_views < 1 {
            return Err(Error::Config("min_consistent_views must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub cloud: PointCloud,
    /// Per reference view: which pixels emitted a point.
    pub emitted: Vec<Grid2D<bool>>,
}

/// Fuses per-view depth maps into one cloud with a depth-consistency check.
///
/// For each valid reference pixel the backprojected point is projected into
/// every other view. A source view agrees when the point lands in frame on a
/// valid pixel and its projected depth is within `depth_threshold` of the
/// stored depth there. A point is kept when the reference plus agreeing views
/// number at least `min_consistent_views`. The emitted point lies on the
/// reference ray at the mean of the reference depth and the agreeing source
/// depths, each mapped onto the ray. Points are emitted row-major per
/// reference view, views in input order, without deduplication.
pub fn fuse_depths(views: &[(CameraView, DepthGrid)], cfg: &FusionConfig) -> Result<PointCloud> {
    Ok(fuse_depths_detailed(views, cfg)?.cloud)
}

pub fn fuse_depths_detailed(views: &[(CameraView, DepthGrid)], cfg: &FusionConfig) -> Result<FusionOutput> {
    if views.len() < 2 {
        return Err(Error::invalid(format!("fusion needs at least 2 views, got {}", views.len())));
    }
    cfg.validate()?;
    let mut points = Vec::new();
    let mut emitted = Vec::with_capacity(views.len());
    for (r, (ref_view, ref_depth)) in views.iter().enumerate() {
        let (w, h) = ref_depth.dims();
        // rotation and translation taking reference-camera coordinates into
        // each source camera
        let rel: Vec<(usize, Matrix3<f64>, Vector3<f64>)> = views
            .iter()
            .enumerate()
            .filter(|(s, _)| *s != r)
            .map(|(s, (v, _))| {
                let rot = v.rotation * ref_view.rotation.transpose();
                (s, rot, v.translation - rot * ref_view.translation)
            })
            .collect();
        let rows: Vec<Vec<(usize, [f64; 3])>> = (0..h)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::new();
                for x in 0..w {
                    let d_ref = *ref_depth.get(x, y);
                    if !is_valid_depth(d_ref) {
                        continue;
                    }
                    let ray = ref_view.ray(x as f64, y as f64);
                    let mut sum = d_ref;
                    let mut agree = 1usize;
                    for (s, rot, t) in &rel {
                        let (src_view, src_depth) = &views[*s];
                        let dir = rot * ray;
                        let pc = dir * d_ref + t;
                        if !(pc.z > 0.0) {
                            continue;
                        }
                        let k = &src_view.intrinsics;
                        let u = (k.fx * pc.x / pc.z + k.cx).round();
                        let v = (k.fy * pc.y / pc.z + k.cy).round();
                        if !(u >= 0.0 && v >= 0.0 && u < src_depth.width() as f64 && v < src_depth.height() as f64) {
                            continue;
                        }
                        let d_src = *src_depth.get(u as usize, v as usize);
                        if !is_valid_depth(d_src) || (pc.z - d_src).abs() > cfg.depth_threshold {
                            continue;
                        }
                        agree += 1;
                        // source z along the reference ray is dir.z * lambda + t.z
                        sum += if dir.z.abs() > 1e-12 { (d_src - t.z) / dir.z } else { d_ref };
                    }
                    if agree >= cfg.min_consistent_views {
                        let p = ref_view.to_world(&(ray * (sum / agree as f64)));
                        row.push((x, [p.x, p.y, p.z]));
                    }
                }
                row
            })
            .collect();
        let mut mask = Grid2D::filled(w, h, false)?;
        for (y, row) in rows.into_iter().enumerate() {
            for (x, p) in row {
                *mask.get_mut(x, y) = true;
                points.push(p);
            }
        }
        emitted.push(mask);
    }
    Ok(FusionOutput { cloud: PointCloud::new(points)?, emitted })
}
