use super::Grid2D;
use crate::error::{Error, Result};

/// Exact Euclidean distance from every pixel to the nearest `true` pixel.
///
/// Separable squared-distance transform (lower envelope of parabolas), one pass
/// over columns and one over rows.
pub fn distance_to_nearest(mask: &Grid2D<bool>) -> Result<Grid2D<f64>> {
    if !mask.data().iter().any(|&m| m) {
        return Err(Error::Empty("distance mask has no set pixel"));
    }
    let (w, h) = mask.dims();
    let far = ((w * w + h * h) as f64) * 4.0 + 1.0;
    let mut sq: Vec<f64> = mask.data().iter().map(|&m| if m { 0.0 } else { far }).collect();

    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut env = Envelope::with_capacity(n);

    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        env.transform(&f[..h], &mut out[..h]);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        let row = &mut sq[y * w..(y + 1) * w];
        f[..w].copy_from_slice(row);
        env.transform(&f[..w], &mut out[..w]);
        row.copy_from_slice(&out[..w]);
    }
    Grid2D::from_vec(w, h, sq.into_iter().map(f64::sqrt).collect())
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1] }
    }

    /// 1-D squared distance transform: `out[q] = min_p (q - p)^2 + f[p]`.
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k = 0usize;
        v[0] = 0;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in 1..n {
            let qf = q as f64;
            let mut s;
            loop {
                let p = v[k] as f64;
                s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
                // z[0] is -inf, so this never walks past the first parabola
                if s > z[k] {
                    break;
                }
                k -= 1;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while z[k + 1] < qf {
                k += 1;
            }
            let d = qf - v[k] as f64;
            *o = d * d + f[v[k]];
        }
    }
}
