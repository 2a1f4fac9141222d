use crate::error::{Error, Result};
use crate::kernel::trilinear::node_coord;
use crate::kernel::Tensor;
use crate::TRUNCATION;

use super::Shape;

/// Node-centred scalar grid over the world box, `values[(i * r + j) * r + k]`
/// at node `(x_i, y_j, z_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid3 {
    res: usize,
    values: Vec<f32>,
}

impl ScalarGrid3 {
    pub fn new(res: usize, values: Vec<f32>) -> Result<Self> {
        if res < 2 {
            return Err(Error::Dimension(format!("grid resolution {res} < 2")));
        }
        if values.len() != res * res * res {
            return Err(Error::Dimension(format!(
                "grid of resolution {res} needs {} values, got {}",
                res * res * res,
                values.len()
            )));
        }
        Ok(Self { res, values })
    }

    /// Evaluates `f` at every node.
    pub fn from_fn(res: usize, f: impl Fn([f64; 3]) -> f64 + Sync) -> Result<Self> {
        use rayon::prelude::*;
        if res < 2 {
            return Err(Error::Dimension(format!("grid resolution {res} < 2")));
        }
        let values = (0..res * res * res)
            .into_par_iter()
            .map(|idx| f(Self::position_of(res, idx)) as f32)
            .collect();
        Ok(Self { res, values })
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        2.0 * crate::BOX_HALF / (self.res - 1) as f64
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res + j) * self.res + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    fn position_of(res: usize, idx: usize) -> [f64; 3] {
        let (i, j, k) = (idx / (res * res), idx / res % res, idx % res);
        [node_coord(i, res), node_coord(j, res), node_coord(k, res)]
    }

    pub fn node_position(&self, idx: usize) -> [f64; 3] {
        Self::position_of(self.res, idx)
    }

    /// Copy clamped to the truncation band.
    pub fn truncated(&self) -> Self {
        let t = TRUNCATION as f32;
        Self {
            res: self.res,
            values: self.values.iter().map(|v| v.clamp(-t, t)).collect(),
        }
    }

    pub fn is_truncated(&self) -> bool {
        let t = TRUNCATION as f32;
        self.values.iter().all(|v| v.abs() <= t)
    }

    /// Encoder input `[1, 1, r, r, r]`, normalised to `[-1, 1]`.
    pub fn to_input<T: crate::kernel::Scalar>(&self) -> Tensor<T> {
        let inv = 1.0 / TRUNCATION;
        let data = self
            .values
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64 * inv))
            .collect();
        Tensor::from_vec(&[1, 1, self.res, self.res, self.res], data).expect("grid shape")
    }
}

/// Samples `shape` at every node and clamps to the truncation band.
pub fn bake_grid(shape: &Shape, res: usize) -> Result<ScalarGrid3> {
    ScalarGrid3::from_fn(res, |p| shape.eval_at(p).clamp(-TRUNCATION, TRUNCATION))
}
