//! Synthetic planar scenes with analytic depth, normals and texture masks.
//!
//! World axes match an unrotated camera: x right, y down, z forward. Textures
//! are evaluated in image space, so checker corners sit on a known pixel
//! lattice in every view.

use nalgebra::{Point3, Vector3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Intrinsics, PointCloud};
use crate::grids::{is_valid_depth, ColorGrid, DepthGrid, Grid2D, NormalGrid};

const CHECKER_DARK: f64 = 0.2;
const CHECKER_LIGHT: f64 = 0.8;
const FLAT_GRAY: f64 = 0.5;
const NOISE_BLOCK: usize = 4;
/// Minimum fraction of pixels of every view that must hit geometry.
pub const MIN_COVERAGE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Open box seen from inside: back wall, floor, ceiling, left, right.
    BoxRoom,
    /// Two walls meeting in a vertical edge at 40% of the image width.
    TwoWalls,
    /// One slanted wall split into a left strip, a wide middle and a right
    /// strip, the strips each 1/8 of the image width.
    FarWall,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box_room" => Ok(Layout::BoxRoom),
            "two_walls" => Ok(Layout::TwoWalls),
            "far_wall" => Ok(Layout::FarWall),
            _ => Err(Error::Config(format!("unknown layout {s:?} (box_room, two_walls, far_wall)"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::BoxRoom => "box_room",
            Layout::TwoWalls => "two_walls",
            Layout::FarWall => "far_wall",
        })
    }
}

impl Layout {
    pub fn surface_count(self) -> usize {
        match self {
            Layout::BoxRoom => 5,
            Layout::TwoWalls => 2,
            Layout::FarWall => 3,
        }
    }

    /// Meters; meaning depends on the layout (see [`SceneSpec::size`]).
    pub fn default_size(self) -> [f64; 3] {
        match self {
            Layout::BoxRoom => [4.0, 3.0, 5.0],
            Layout::TwoWalls => [6.0, 4.0, 4.0],
            Layout::FarWall => [8.0, 6.0, 4.0],
        }
    }

    pub fn default_textures(self) -> Vec<Texture> {
        use Texture::*;
        match self {
            Layout::BoxRoom => vec![Checker(16), Noise(1), Flat, Checker(12), Noise(2)],
            Layout::TwoWalls => vec![Checker(8), Flat],
            Layout::FarWall => vec![Checker(8), Flat, Checker(8)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Texture {
    /// Square cells of the given pixel size.
    Checker(usize),
    /// Random gray blocks from the given seed.
    Noise(u64),
    Flat,
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad texture {s:?} (checker:<px>, noise:<seed>, flat)"));
        match s.split_once(':') {
            None if s == "flat" => Ok(Texture::Flat),
            Some(("checker", n)) => match n.parse::<usize>() {
                Ok(c) if c >= 1 => Ok(Texture::Checker(c)),
                _ => Err(bad()),
            },
            Some(("noise", n)) => n.parse().map(Texture::Noise).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Texture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Texture::Checker(c) => write!(f, "checker:{c}"),
            Texture::Noise(s) => write!(f, "noise:{s}"),
            Texture::Flat => f.write_str("flat"),
        }
    }
}

/// Rectangle `origin + a*u + b*v`, `a, b` in `[0, 1]`, with `u` orthogonal to `v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surface {
    pub origin: Point3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub texture: Texture,
}

impl Surface {
    pub fn unit_normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    pub fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    /// Signed distance of `p` from the surface's plane.
    pub fn plane_distance(&self, p: &Point3<f64>) -> f64 {
        self.unit_normal().dot(&(p - self.origin))
    }

    /// Ray parameter of the hit, if the ray `c + t*d` meets the rectangle at `t > 0`.
    fn intersect(&self, c: &Point3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let n = self.u.cross(&self.v);
        let denom = d.dot(&n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.origin - c).dot(&n) / denom;
        if !(t > 0.0) {
            return None;
        }
        let q = c + d * t - self.origin;
        let a = q.dot(&self.u) / self.u.norm_squared();
        let b = q.dot(&self.v) / self.v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub layout: Layout,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    /// box_room: room width, height, depth. two_walls: span, height, depth of
    /// the edge. far_wall: wall width, height, depth on the optical axis.
    pub size: [f64; 3],
    /// One per surface, in layout order.
    pub textures: Vec<Texture>,
    pub views: Vec<CameraView>,
}

fn default_intrinsics(width: usize, height: usize) -> Intrinsics {
    let f = 0.75 * width as f64;
    Intrinsics { fx: f, fy: f, cx: (width as f64 - 1.0) / 2.0, cy: (height as f64 - 1.0) / 2.0 }
}

const UP: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);

/// Slope dz/dx of the far wall.
const FAR_WALL_SLANT: f64 = 0.3;

fn default_views(layout: Layout, size: [f64; 3], k: Intrinsics) -> Result<Vec<CameraView>> {
    let look = |e: [f64; 3], t: [f64; 3]| CameraView::look_at(k, Point3::from(e), Point3::from(t), UP);
    match layout {
        Layout::BoxRoom => {
            // three cameras orbiting a point 2.5 m into a 4 x 3 x 5 room, about
            // 30 degrees apart so that equal depth errors in two views do not
            // look consistent; scaled with the room
            let s = |p: [f64; 3]| [p[0] * size[0] / 4.0, p[1] * size[1] / 3.0, -1.0 + (p[2] + 1.0) * size[2] / 5.0];
            vec![
                look(s([-1.5, -0.6, 0.0]), s([0.3, 0.0, 2.5])),
                look(s([0.0, 0.8, -0.8]), s([0.0, -0.2, 2.5])),
                look(s([1.5, -0.6, 0.0]), s([-0.3, 0.0, 2.5])),
            ]
        }
        Layout::TwoWalls | Layout::FarWall => vec![
            look([0.0, 0.0, 0.0], [0.0, 0.0, size[2]]),
            look([0.25, 0.0, 0.0], [0.25, 0.0, size[2]]),
        ],
    }
    .into_iter()
    .collect()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewFile {
    eye: [f64; 3],
    target: [f64; 3],
    up: Option<[f64; 3]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    layout: String,
    width: Option<usize>,
    height: Option<usize>,
    fx: Option<f64>,
    fy: Option<f64>,
    cx: Option<f64>,
    cy: Option<f64>,
    size: Option<[f64; 3]>,
    textures: Option<Vec<String>>,
    views: Option<Vec<ViewFile>>,
}

impl SceneSpec {
    /// 320x240 with the layout's default geometry, textures and views.
    pub fn default_for(layout: Layout) -> Result<Self> {
        Self::with_dims(layout, 320, 240)
    }

    pub fn with_dims(layout: Layout, width: usize, height: usize) -> Result<Self> {
        let intrinsics = default_intrinsics(width, height);
        let size = layout.default_size();
        let spec = Self {
            layout,
            width,
            height,
            intrinsics,
            size,
            textures: layout.default_textures(),
            views: default_views(layout, size, intrinsics)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses the TOML scene description. Only `layout` is required; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let f: SceneFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let layout: Layout = f.layout.parse()?;
        let (width, height) = (f.width.unwrap_or(320), f.height.unwrap_or(240));
        let d = default_intrinsics(width, height);
        let intrinsics = Intrinsics {
            fx: f.fx.unwrap_or(d.fx),
            fy: f.fy.unwrap_or(d.fy),
            cx: f.cx.unwrap_or(d.cx),
            cy: f.cy.unwrap_or(d.cy),
        };
        let size = f.size.unwrap_or(layout.default_size());
        let textures = match f.textures {
            Some(t) => t.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
            None => layout.default_textures(),
        };
        let views = match f.views {
            Some(v) => v
                .iter()
                .map(|v| {
                    CameraView::look_at(
                        intrinsics,
                        Point3::from(v.eye),
                        Point3::from(v.target),
                        v.up.map(Vector3::from).unwrap_or(UP),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            None => default_views(layout, size, intrinsics)?,
        };
        let spec = Self { layout, width, height, intrinsics, size, textures, views };
        spec.validate()?;
        for i in 0..spec.views.len() {
            spec.check_coverage(i)?;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Config(format!("image {}x{} is smaller than 8x8", self.width, self.height)));
        }
        if !self.size.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(Error::Config(format!("scene size must be positive, got {:?}", self.size)));
        }
        if self.layout == Layout::BoxRoom && self.size[2] <= 1.0 {
            return Err(Error::Config("box_room depth must exceed 1 m".into()));
        }
        if self.textures.len() != self.layout.surface_count() {
            return Err(Error::Config(format!(
                "{} has {} surfaces, got {} textures",
                self.layout,
                self.layout.surface_count(),
                self.textures.len()
            )));
        }
        if self.textures.contains(&Texture::Checker(0)) {
            return Err(Error::Config("checker cell must be at least 1 px".into()));
        }
        if self.views.is_empty() {
            return Err(Error::Config("scene needs at least one view".into()));
        }
        Ok(())
    }

    pub fn surfaces(&self) -> Vec<Surface> {
        let t = &self.textures;
        let [a, b, c] = self.size;
        let s = |o: [f64; 3], u: [f64; 3], v: [f64; 3], texture: Texture| Surface {
            origin: Point3::from(o),
            u: Vector3::from(u),
            v: Vector3::from(v),
            texture,
        };
        match self.layout {
            Layout::BoxRoom => {
                let (x0, y0, z0) = (-a / 2.0, -b / 2.0, -1.0);
                let z1 = c - 1.0;
                vec![
                    s([x0, y0, z1], [a, 0.0, 0.0], [0.0, b, 0.0], t[0]),
                    s([x0, -y0, z0], [a, 0.0, 0.0], [0.0, 0.0, c], t[1]),
                    s([x0, y0, z0], [a, 0.0, 0.0], [0.0, 0.0, c], t[2]),
                    s([x0, y0, z0], [0.0, 0.0, c], [0.0, b, 0.0], t[3]),
                    s([-x0, y0, z0], [0.0, 0.0, c], [0.0, b, 0.0], t[4]),
                ]
            }
            Layout::TwoWalls => {
                let k = &self.intrinsics;
                let slope = (0.4 * self.width as f64 - k.cx) / k.fx;
                let edge = [slope * c, -b / 2.0, c];
                let left = [-a / 2.0, -b / 2.0, c - 1.5];
                let right = [a / 2.0, -b / 2.0, c - 1.5];
                let sub = |p: [f64; 3], q: [f64; 3]| [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
                vec![
                    s(left, sub(edge, left), [0.0, b, 0.0], t[0]),
                    s(edge, sub(right, edge), [0.0, b, 0.0], t[1]),
                ]
            }
            Layout::FarWall => {
                // split where columns w/8 and 7w/8 of an unrotated camera at
                // the origin meet the plane z = depth + slant * x
                let k = &self.intrinsics;
                let split = |col: f64| {
                    let r = (col - k.cx) / k.fx;
                    r * c / (1.0 - FAR_WALL_SLANT * r)
                };
                let w = self.width as f64;
                let xs = [-a / 2.0, split(w / 8.0), split(7.0 * w / 8.0), a / 2.0];
                (0..3)
                    .map(|i| {
                        let len = xs[i + 1] - xs[i];
                        s(
                            [xs[i], -b / 2.0, c + FAR_WALL_SLANT * xs[i]],
                            [len, 0.0, FAR_WALL_SLANT * len],
                            [0.0, b, 0.0],
                            t[i],
                        )
                    })
                    .collect()
            }
        }
    }

    /// Fraction of the pixels of view `i` that hit a surface.
    pub fn coverage(&self, i: usize) -> Result<f64> {
        let view = self.views.get(i).ok_or_else(|| Error::invalid(format!("no view {i}")))?;
        let surfaces = self.surfaces();
        let hits: usize = (0..self.height)
            .into_par_iter()
            .map(|y| (0..self.width).filter(|&x| cast(view, &surfaces, x, y).is_some()).count())
            .sum();
        Ok(hits as f64 / (self.width * self.height) as f64)
    }

    fn check_coverage(&self, i: usize) -> Result<()> {
        if self.coverage(i)? < MIN_COVERAGE {
            return Err(Error::NoGeometry(i));
        }
        Ok(())
    }
}

/// Nearest surface hit through pixel `(x, y)`: surface index and camera-frame depth.
fn cast(view: &CameraView, surfaces: &[Surface], x: usize, y: usize) -> Option<(usize, f64)> {
    let c = view.center();
    let d = view.rotation.transpose() * view.ray(x as f64, y as f64);
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in surfaces.iter().enumerate() {
        if let Some(t) = s.intersect(&c, &d) {
            if best.is_none_or(|(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct RenderedView {
    pub camera: CameraView,
    pub color: ColorGrid,
    /// Camera-frame z; 0 where no surface is hit.
    pub depth: DepthGrid,
    /// Camera frame, facing the camera; `(0, 0, -1)` where no surface is hit.
    pub normals: NormalGrid,
    pub texture_mask: Grid2D<bool>,
}

fn noise_table(seed: u64, width: usize, height: usize) -> Grid2D<f64> {
    let (bw, bh) = (width.div_ceil(NOISE_BLOCK), height.div_ceil(NOISE_BLOCK));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..bw * bh).map(|_| rng.gen_range(CHECKER_DARK..CHECKER_LIGHT)).collect();
    Grid2D::from_vec(bw, bh, data).expect("nonzero dims")
}

/// Ray-casts every view. Fails with `NoGeometry` when a view's coverage is
/// below [`MIN_COVERAGE`].
pub fn render_scene(spec: &SceneSpec) -> Result<Vec<RenderedView>> {
    spec.validate()?;
    let surfaces = spec.surfaces();
    let (w, h) = (spec.width, spec.height);
    let noise: Vec<Option<Grid2D<f64>>> = surfaces
        .iter()
        .map(|s| match s.texture {
            Texture::Noise(seed) => Some(noise_table(seed, w, h)),
            _ => None,
        })
        .collect();
    let mut out = Vec::with_capacity(spec.views.len());
    for (i, view) in spec.views.iter().enumerate() {
        let hits: Vec<Option<(usize, f64)>> = (0..w * h)
            .into_par_iter()
            .map(|p| cast(view, &surfaces, p % w, p / w))
            .collect();
        let covered = hits.iter().filter(|h| h.is_some()).count();
        if (covered as f64) < MIN_COVERAGE * (w * h) as f64 {
            return Err(Error::NoGeometry(i));
        }
        let normals_cam: Vec<Vector3<f64>> = surfaces.iter().map(|s| view.rotation * s.unit_normal()).collect();
        let mut color = Grid2D::filled(w, h, [0.0; 3])?;
        let mut depth = Grid2D::filled(w, h, 0.0)?;
        let mut normals = Grid2D::filled(w, h, [0.0, 0.0, -1.0])?;
        let mut texture_mask = Grid2D::filled(w, h, false)?;
        for (p, hit) in hits.into_iter().enumerate() {
            let Some((s, z)) = hit else { continue };
            let (x, y) = (p % w, p / w);
            *depth.get_mut(x, y) = z;
            let mut n = normals_cam[s];
            if n.dot(&view.ray(x as f64, y as f64)) > 0.0 {
                n = -n;
            }
            *normals.get_mut(x, y) = [n.x, n.y, n.z];
            let g = match surfaces[s].texture {
                Texture::Checker(cell) => {
                    if (x / cell + y / cell) % 2 == 0 {
                        CHECKER_LIGHT
                    } else {
                        CHECKER_DARK
                    }
                }
                Texture::Noise(_) => *noise[s].as_ref().expect("noise table").get(x / NOISE_BLOCK, y / NOISE_BLOCK),
                Texture::Flat => FLAT_GRAY,
            };
            *color.get_mut(x, y) = [g; 3];
            *texture_mask.get_mut(x, y) = surfaces[s].texture != Texture::Flat;
        }
        out.push(RenderedView { camera: *view, color, depth, normals, texture_mask });
    }
    Ok(out)
}

/// Deterministic stratified points on every surface: `round(area * density)`
/// per surface, one per selected cell of a near-square grid over the
/// rectangle, selected cells spread evenly.
pub fn gt_cloud(spec: &SceneSpec, samples_per_m2: f64) -> Result<PointCloud> {
    if !(samples_per_m2 > 0.0) || !samples_per_m2.is_finite() {
        return Err(Error::invalid(format!("density must be positive, got {samples_per_m2}")));
    }
    spec.validate()?;
    let mut points = Vec::new();
    for s in spec.surfaces() {
        points.extend(surface_samples(&s, samples_per_m2));
    }
    PointCloud::new(points)
}

pub fn surface_samples(s: &Surface, samples_per_m2: f64) -> Vec<[f64; 3]> {
    let n = (s.area() * samples_per_m2).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    let aspect = s.u.norm() / s.v.norm();
    let na = ((n as f64 * aspect).sqrt().round() as usize).clamp(1, n);
    let nb = n.div_ceil(na);
    let m = na * nb;
    (0..n)
        .map(|i| {
            let j = (2 * i + 1) * m / (2 * n);
            let a = ((j % na) as f64 + 0.5) / na as f64;
            let b = ((j / na) as f64 + 0.5) / nb as f64;
            let p = s.origin + s.u * a + s.v * b;
            [p.x, p.y, p.z]
        })
        .collect()
}

/// Offsets exactly `round(frac * valid)` valid pixels by `+-magnitude`. The
/// sign is random but forced positive where subtracting would leave a
/// non-positive depth.
pub fn corrupt_depth(d: &DepthGrid, outlier_frac: f64, magnitude: f64, seed: u64) -> Result<DepthGrid> {
    if !(0.0..=1.0).contains(&outlier_frac) {
        return Err(Error::invalid(format!("outlier fraction must be in [0, 1], got {outlier_frac}")));
    }
    if !(magnitude >= 0.0) || !magnitude.is_finite() {
        return Err(Error::invalid(format!("magnitude must be nonnegative, got {magnitude}")));
    }
    let valid: Vec<usize> = (0..d.len()).filter(|&i| is_valid_depth(d.data()[i])).collect();
    let count = (outlier_frac * valid.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, valid.len(), count).into_vec();
    picked.sort_unstable();
    let mut out = d.clone();
    for k in picked {
        let v = &mut out.data_mut()[valid[k]];
        let up = rng.gen_bool(0.5) || *v - magnitude <= 0.0;
        *v += if up { magnitude } else { -magnitude };
    }
    Ok(out)
}
