//! Single-scale spatial propagation.
//!
//! One step updates every pixel from the previous iterate (Jacobi sweep):
//!
//! ```text
//! x'[i] = wc[i] * x[i] + sum_k w[i,k] * c[i+o_k] * x[i+o_k]
//! ```
//!
//! where `c` is the per-pixel confidence (fixed to 1 in hard mode). Sparse
//! pixels are then either overwritten with their observation (hard mode) or
//! blended with it by their input confidence (confidence mode).

use rayon::prelude::*;

use crate::affinity::AffinityField;
use crate::error::{Error, Result};
use crate::grids::{ConfidenceGrid, DepthGrid, Grid2D};
use crate::sampling::SparseDepth;

/// Neighborhood geometry of the propagation kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelSpec {
    offsets: Vec<(i32, i32)>,
    dilation: u32,
    pub iterations: usize,
}

impl KernelSpec {
    pub fn new(offsets: Vec<(i32, i32)>, dilation: u32, iterations: usize) -> Result<Self> {
        if dilation < 1 {
            return Err(Error::invalid("kernel dilation must be at least 1"));
        }
        if offsets.is_empty() {
            return Err(Error::invalid("kernel needs at least one offset"));
        }
        for (i, o) in offsets.iter().enumerate() {
            if *o == (0, 0) {
                return Err(Error::invalid("kernel offsets exclude the center (0, 0)"));
            }
            if offsets[..i].contains(o) {
                return Err(Error::invalid(format!("duplicate kernel offset {o:?}")));
            }
        }
        Ok(Self { offsets, dilation, iterations })
    }

    /// Unscaled offsets.
    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    pub fn dilation(&self) -> u32 {
        self.dilation
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Offsets multiplied by the dilation.
    pub fn effective_offsets(&self) -> Vec<(i32, i32)> {
        let d = self.dilation as i32;
        self.offsets.iter().map(|&(dx, dy)| (dx * d, dy * d)).collect()
    }

    /// Largest Chebyshev extent of one step.
    pub fn reach(&self) -> u32 {
        let m = self.offsets.iter().map(|&(dx, dy)| dx.unsigned_abs().max(dy.unsigned_abs())).max();
        m.unwrap_or(0) * self.dilation
    }

    /// Same neighborhood geometry, ignoring the iteration count.
    pub fn same_geometry(&self, other: &KernelSpec) -> bool {
        self.effective_offsets() == other.effective_offsets()
    }

    pub fn is_ring3x3(&self) -> bool {
        self.offsets == RING_3X3
    }
}

const RING_3X3: [(i32, i32); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// The eight-neighbor ring scaled by `dilation`. Dilation 1 is the plain 3x3
/// convolutional kernel.
pub fn kernel_3x3_dilated(dilation: u32, iterations: usize) -> Result<KernelSpec> {
    KernelSpec::new(RING_3X3.to_vec(), dilation, iterations)
}

/// How sparse observations enter each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PropagationMode {
    /// Sparse pixels are replaced by their observation; no confidences.
    #[default]
    HardReplace,
    /// Neighbor terms are scaled by pixel confidence and sparse pixels blend
    /// observation and propagated value by their input confidence.
    ConfidenceBlend,
}

impl std::str::FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" | "hard_replace" => Ok(Self::HardReplace),
            "conf" | "confidence" | "confidence_blend" => Ok(Self::ConfidenceBlend),
            other => Err(Error::Config(format!("unknown propagation mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::HardReplace => "hard",
            Self::ConfidenceBlend => "conf",
        })
    }
}

#[derive(Debug, Clone)]
pub struct PropagationState {
    pub depth: DepthGrid,
    pub sparse: SparseDepth,
    pub affinity: AffinityField,
    pub pixel_conf: ConfidenceGrid,
    pub mode: PropagationMode,
}

#[derive(Debug, Clone, Copy)]
struct Seed {
    value: f64,
    conf: f64,
}

/// Dense per-pixel lookup of the sparse observations.
fn seed_table(sparse: &SparseDepth, width: usize, height: usize) -> Result<Vec<Option<Seed>>> {
    if sparse.width() != width || sparse.height() != height {
        return Err(Error::DimensionMismatch {
            what: "sparse depth",
            got_w: sparse.width(),
            got_h: sparse.height(),
            want_w: width,
            want_h: height,
        });
    }
    let mut table = vec![None; width * height];
    for e in sparse.entries() {
        if !(0.0..=1.0).contains(&e.conf) {
            return Err(Error::invalid(format!("input confidence {} outside [0, 1]", e.conf)));
        }
        table[e.y * width + e.x] = Some(Seed { value: e.depth, conf: e.conf });
    }
    Ok(table)
}

impl PropagationState {
    pub fn new(
        depth: DepthGrid,
        sparse: SparseDepth,
        affinity: AffinityField,
        pixel_conf: ConfidenceGrid,
        mode: PropagationMode,
    ) -> Result<Self> {
        let s = Self { depth, sparse, affinity, pixel_conf, mode };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let (w, h) = self.depth.dims();
        self.affinity.expect_dims(w, h)?;
        self.pixel_conf.expect_dims("pixel confidence", w, h)?;
        if self.mode == PropagationMode::ConfidenceBlend {
            crate::grids::validate_confidence(&self.pixel_conf)?;
        }
        Ok(())
    }

    fn engine(&self) -> Result<Engine<'_>> {
        self.check()?;
        let (w, h) = self.depth.dims();
        Ok(Engine {
            affinity: &self.affinity,
            offsets: self.affinity.kernel().effective_offsets(),
            conf: match self.mode {
                PropagationMode::HardReplace => None,
                PropagationMode::ConfidenceBlend => Some(self.pixel_conf.data()),
            },
            seeds: seed_table(&self.sparse, w, h)?,
            mode: self.mode,
            width: w,
            height: h,
        })
    }
}

struct Engine<'a> {
    affinity: &'a AffinityField,
    offsets: Vec<(i32, i32)>,
    conf: Option<&'a [f64]>,
    seeds: Vec<Option<Seed>>,
    mode: PropagationMode,
    width: usize,
    height: usize,
}

impl Engine<'_> {
    fn step(&self, prev: &[f64], next: &mut [f64]) {
        let w = self.width;
        next.par_chunks_mut(w).enumerate().for_each(|(y, row)| self.step_row(prev, y, row));
    }

    fn step_row(&self, prev: &[f64], y: usize, row: &mut [f64]) {
        let (w, h) = (self.width as i64, self.height as i64);
        let k_count = self.offsets.len();
        let weights = self.affinity.neighbor_weights();
        for (x, out) in row.iter_mut().enumerate() {
            let i = y * self.width + x;
            if let (PropagationMode::HardReplace, Some(seed)) = (self.mode, self.seeds[i]) {
                *out = seed.value;
                continue;
            }
            let center = prev[i];
            let wk = &weights[i * k_count..(i + 1) * k_count];
            // wc = 1 - sum(w), so wc*x + sum(w*v) == x + sum(w*(v - x)); this
            // form keeps constant fields exactly fixed.
            let mut delta = 0.0;
            for (&(dx, dy), &wgt) in self.offsets.iter().zip(wk) {
                let nx = x as i64 + dx as i64;
                let ny = y as i64 + dy as i64;
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let j = ny as usize * self.width + nx as usize;
                let v = match self.conf {
                    Some(c) => c[j] * prev[j],
                    None => prev[j],
                };
                delta += wgt * (v - center);
            }
            let blended = center + delta;
            *out = match self.seeds[i] {
                Some(seed) => seed.conf * seed.value + (1.0 - seed.conf) * blended,
                None => blended,
            };
        }
    }

    fn run(&self, initial: &DepthGrid, iterations: usize) -> DepthGrid {
        let mut cur = initial.clone();
        if iterations == 0 {
            return cur;
        }
        let mut next = cur.clone();
        for _ in 0..iterations {
            self.step(cur.data(), next.data_mut());
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

fn require_mode(state: &PropagationState, mode: PropagationMode) -> Result<()> {
    if state.mode != mode {
        return Err(Error::Config(format!("state is in {} mode, step expects {mode}", state.mode)));
    }
    Ok(())
}

/// One hard-replacement step.
pub fn propagate_step_hard(state: &PropagationState) -> Result<DepthGrid> {
    require_mode(state, PropagationMode::HardReplace)?;
    Ok(state.engine()?.run(&state.depth, 1))
}

/// One confidence-weighted step.
pub fn propagate_step_conf(state: &PropagationState) -> Result<DepthGrid> {
    require_mode(state, PropagationMode::ConfidenceBlend)?;
    Ok(state.engine()?.run(&state.depth, 1))
}

/// Runs `kernel.iterations` steps in the state's mode. The kernel geometry must
/// be the one the affinity field was built for.
pub fn run_propagation(state: &PropagationState, kernel: &KernelSpec) -> Result<DepthGrid> {
    if !state.affinity.kernel().same_geometry(kernel) {
        return Err(Error::KernelMismatch(format!(
            "affinity built for dilation {} / {} offsets, run requested dilation {} / {} offsets",
            state.affinity.kernel().dilation(),
            state.affinity.kernel().len(),
            kernel.dilation(),
            kernel.len()
        )));
    }
    Ok(state.engine()?.run(&state.depth, kernel.iterations))
}

/// Boolean mask of the sparse coordinates.
pub fn sparse_mask(sparse: &SparseDepth) -> Grid2D<bool> {
    let mut m = Grid2D::filled(sparse.width(), sparse.height(), false).expect("sparse dims are nonzero");
    for e in sparse.entries() {
        *m.get_mut(e.x, e.y) = true;
    }
    m
}
