//! Uniform-grid index for fixed-radius neighbor queries.

use std::collections::HashMap;

type Cell = [i64; 3];

/// Bucketed point set answering "is there a point within `r` of `q`".
///
/// Points are sorted by cell so each bucket is a contiguous slice.
#[derive(Debug, Clone)]
pub struct PointIndex {
    cell: f64,
    points: Vec<[f64; 3]>,
    buckets: HashMap<Cell, (usize, usize)>,
}

impl PointIndex {
    /// `cell` is the bucket edge; queries are cheapest with `r <= cell`.
    pub fn new(points: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0 && cell.is_finite(), "cell size must be positive");
        let key = |p: &[f64; 3]| p.map(|c| (c / cell).floor() as i64);
        let mut keyed: Vec<(Cell, [f64; 3])> = points.iter().map(|p| (key(p), *p)).collect();
        keyed.sort_by_key(|a| a.0);
        let mut buckets = HashMap::new();
        let mut start = 0;
        for i in 1..=keyed.len() {
            if i == keyed.len() || keyed[i].0 != keyed[start].0 {
                buckets.insert(keyed[start].0, (start, i));
                start = i;
            }
        }
        Self { cell, points: keyed.into_iter().map(|(_, p)| p).collect(), buckets }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn any_within(&self, q: [f64; 3], r: f64) -> bool {
        let r2 = r * r;
        let reach = (r / self.cell).ceil() as i64;
        let c = q.map(|v| (v / self.cell).floor() as i64);
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let Some(&(s, e)) = self.buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    if self.points[s..e].iter().any(|p| dist2(p, &q) <= r2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}
