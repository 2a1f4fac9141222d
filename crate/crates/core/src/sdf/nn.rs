//! Exact nearest-neighbour queries over a uniform spatial hash.

use crate::error::{Error, Result};

use super::PointBatch;

/// Bucketed point set answering exact nearest-neighbour queries.
///
/// Cells are searched in growing Chebyshev rings around the query cell until
/// no unvisited cell can hold a closer point.
#[derive(Clone, Debug)]
pub struct NearestNeighbors {
    points: Vec<[f64; 3]>,
    lo: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    /// Offsets into `order` per cell (counting-sort layout).
    starts: Vec<usize>,
    order: Vec<usize>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    dx * dx + dy * dy + dz * dz
}

impl NearestNeighbors {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("nearest-neighbour set is empty".into()));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent = [0, 1, 2].map(|a| (hi[a] - lo[a]).max(1e-9));
        // About two points per cell, at most 128 cells per axis.
        let volume = extent[0] * extent[1] * extent[2];
        let mut cell = (2.0 * volume / points.len() as f64).cbrt();
        let max_extent = extent.iter().cloned().fold(0.0, f64::max);
        cell = cell.max(max_extent / 128.0).max(1e-9);
        let dims = extent.map(|e| ((e / cell).floor() as usize + 1).min(129));
        let mut nn = Self {
            points,
            lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        let n_cells = dims[0] * dims[1] * dims[2];
        let keys: Vec<usize> = nn.points.iter().map(|p| nn.flat(nn.cell_of(p))).collect();
        let mut counts = vec![0usize; n_cells + 1];
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; keys.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        nn.starts = counts;
        nn.order = order;
        Ok(nn)
    }

    pub fn from_batch(batch: &PointBatch) -> Result<Self> {
        Self::new((0..batch.len()).map(|i| batch.position(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    fn cell_of(&self, p: &[f64; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.lo[a]) / self.cell).floor();
            (c.max(0.0) as usize).min(self.dims[a] - 1)
        })
    }

    fn flat(&self, c: [usize; 3]) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    /// Index of the nearest point and its squared distance.
    pub fn nearest(&self, q: &[f64; 3]) -> (usize, f64) {
        let c = self.cell_of(q);
        let mut best = (usize::MAX, f64::INFINITY);
        let max_ring = *self.dims.iter().max().unwrap();
        for ring in 0..=max_ring {
            let lo = c.map(|v| v as isize - ring as isize);
            let hi = c.map(|v| v as isize + ring as isize);
            for i in lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1) {
                for j in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    for k in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                        let on_ring = i == lo[0] || i == hi[0] || j == lo[1] || j == hi[1] || k == lo[2] || k == hi[2];
                        if !on_ring {
                            continue;
                        }
                        let f = self.flat([i as usize, j as usize, k as usize]);
                        for &pi in &self.order[self.starts[f]..self.starts[f + 1]] {
                            let d = dist2(q, &self.points[pi]);
                            if d < best.1 || (d == best.1 && pi < best.0) {
                                best = (pi, d);
                            }
                        }
                    }
                }
            }
            // Distance from q to the outside of the searched block; sides that
            // reach the grid boundary have nothing beyond them.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    bound = bound.min(q[a] - (self.lo[a] + lo[a] as f64 * self.cell));
                }
                if hi[a] < self.dims[a] as isize - 1 {
                    bound = bound.min(self.lo[a] + (hi[a] + 1) as f64 * self.cell - q[a]);
                }
            }
            if bound == f64::INFINITY || (best.0 != usize::MAX && best.1 <= bound.max(0.0).powi(2)) {
                break;
            }
        }
        best
    }

    pub fn nearest_distance(&self, q: &[f64; 3]) -> f64 {
        self.nearest(q).1.sqrt()
    }

    /// Whether some point lies within `radius` of `q`.
    pub fn any_within(&self, q: &[f64; 3], radius: f64) -> bool {
        self.nearest(q).1 <= radius * radius
    }
}

/// Euclidean distance from `x` to the closest point of `pts`.
pub fn nn_distance(x: [f64; 3], pts: &PointBatch) -> Result<f64> {
    Ok(NearestNeighbors::from_batch(pts)?.nearest_distance(&x))
}

/// Reference linear scan.
pub fn brute_force_nearest(points: &[[f64; 3]], q: &[f64; 3]) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = dist2(q, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
