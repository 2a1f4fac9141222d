//! The multilevel L1 training loss.

use crate::error::{Error, Result};
use crate::kernel::Scalar;
use crate::latent::LatentHierarchy;
use crate::sdf::PointBatch;

use super::field::{Field, LevelValues};
use super::model::Model;

/// `scale * Σ_p |S_n(p) - gt(p)|` per level, and its gradient w.r.t. `S_n`.
pub fn l1_terms<T: Scalar>(values: &LevelValues<T>, gt: &[f32], scale: f64) -> (Vec<f64>, LevelValues<T>) {
    let levels = values.s.len();
    let mut grad = LevelValues::zeros(levels, gt.len());
    let step = T::from_f64_lossy(scale);
    let terms = values
        .s
        .iter()
        .zip(grad.s.iter_mut())
        .map(|(s, g)| {
            let mut sum = 0.0;
            for ((&v, &t), gp) in s.iter().zip(gt).zip(g.iter_mut()) {
                let d = v.as_f64() - t as f64;
                sum += d.abs();
                *gp = if d > 0.0 {
                    step
                } else if d < 0.0 {
                    -step
                } else {
                    T::zero()
                };
            }
            scale * sum
        })
        .collect();
    (terms, grad)
}

/// Positions of a batch in world coordinates.
pub fn positions(batch: &PointBatch) -> Vec<[f64; 3]> {
    (0..batch.len()).map(|i| batch.position(i)).collect()
}

/// `L = Σ_n L_n` with `L_n` the mean absolute error of the level-`n`
/// aggregate against the ground-truth SDF. Returns `(L, [L_n])`.
pub fn multilevel_loss<T: Scalar>(model: &Model<T>, z: &LatentHierarchy<T>, batch: &PointBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Argument("multilevel loss needs at least one point".into()));
    }
    let field = Field::new(model, z)?;
    let values = field.values(&positions(batch), model.num_levels() - 1)?;
    let (terms, _) = l1_terms(&values, &batch.gt_sdf, 1.0 / batch.len() as f64);
    Ok((terms.iter().sum(), terms))
}

/// Mean `|S_m - gt|` over a batch.
pub fn mean_abs_error<T: Scalar>(model: &Model<T>, z: &LatentHierarchy<T>, batch: &PointBatch, m: usize) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("error metric needs at least one point".into()));
    }
    let s = Field::new(model, z)?.aggregate(&positions(batch), m)?;
    Ok(s.iter().zip(&batch.gt_sdf).map(|(&v, &t)| (v.as_f64() - t as f64).abs()).sum::<f64>() / batch.len() as f64)
}
