//! Decoder-only latent optimization: auto-decoding a fully observed shape
//! and completing a shape from a single depth image.
//!
//! Network weights are never touched; only the latent grids receive Adam
//! updates, starting from an all-zero hierarchy with fresh optimizer state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamConfig, AdamState, Scalar};
use crate::latent::LatentHierarchy;
use crate::net::{l1_terms, positions, Field, LevelValues, Model};
use crate::sdf::{completion_point_sets, DepthObservation, NearestNeighbors, PointBatch, Shape, VISIBILITY_TOLERANCE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentOptConfig {
    pub steps: usize,
    pub adam: AdamConfig,
    /// Draws per step when auto-decoding.
    pub points: usize,
    pub visible_points: usize,
    pub occluded_points: usize,
    /// Size of the visible and occluded pools drawn from per step.
    pub visible_pool: usize,
    pub occluded_pool: usize,
    /// Weight of the occluded-residual term.
    pub lambda: f64,
    /// Width of the frontier Gaussian.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for LatentOptConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            adam: AdamConfig::with_lr(1e-2),
            points: 2048,
            visible_points: 2048,
            occluded_points: 1024,
            visible_pool: 20_000,
            occluded_pool: 10_000,
            lambda: 10.0,
            sigma: 0.1,
            seed: 0,
        }
    }
}

impl LatentOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Argument(format!("sigma {} must be > 0", self.sigma)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Argument(format!("learning rate {} must be > 0", self.adam.lr)));
        }
        if self.points == 0 || self.visible_points == 0 {
            return Err(Error::Argument("points per step must be positive".into()));
        }
        Ok(())
    }
}

/// `1 - exp(-d² / 2σ²)`: zero at the visible frontier, one far from it.
pub fn occlusion_weight(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!("sigma {sigma} must be > 0")));
    }
    if !(d >= 0.0) {
        return Err(Error::Argument(format!("distance {d} must be >= 0")));
    }
    Ok(1.0 - (-d * d / (2.0 * sigma * sigma)).exp())
}

/// One record of the step-indexed loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
    pub terms: Vec<f64>,
}

/// Renders a loss log as text, one `step=… loss=… level<n>=…` record per line.
pub fn format_loss_log(log: &[StepLoss]) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&format!("step={} loss={:.9}", r.step, r.loss));
        for (n, t) in r.terms.iter().enumerate() {
            out.push_str(&format!(" level{n}={t:.9}"));
        }
        out.push('\n');
    }
    out
}

/// Runs Adam on the latent grids only; `step_loss` draws the step's points
/// and returns their loss terms and gradients.
fn optimize<T: Scalar>(
    model: &Model<T>,
    cfg: &LatentOptConfig,
    mut step_grads: impl FnMut(&LatentHierarchy<T>, &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<crate::kernel::Tensor<T>>)>,
) -> Result<(LatentHierarchy<T>, Vec<StepLoss>)> {
    cfg.validate()?;
    let mut z = LatentHierarchy::zeros(model.spec());
    let mut states: Vec<AdamState<T>> = z.grids().iter().map(|g| AdamState::new(g.shape(), cfg.adam)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (terms, grads) = step_grads(&z, &mut rng)?;
        let loss: f64 = terms.iter().sum();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite latent loss at step {step} (terms {terms:?})")));
        }
        for ((g, grad), s) in z.grids_mut().iter_mut().zip(&grads).zip(&mut states) {
            adam_step(g, grad, s)?;
        }
        log.push(StepLoss { step, loss, terms });
    }
    Ok((z, log))
}

/// Fits a hierarchy to fully observed points with the multilevel L1 loss.
pub fn autodecode_fit<T: Scalar>(
    model: &Model<T>,
    points: &PointBatch,
    cfg: &LatentOptConfig,
) -> Result<(LatentHierarchy<T>, Vec<StepLoss>)> {
    if points.is_empty() {
        return Err(Error::Argument("auto-decoding needs observed points".into()));
    }
    optimize(model, cfg, |z, rng| {
        let batch = points.draw(cfg.points, rng);
        let scale = 1.0 / batch.len() as f64;
        let fg = Field::new(model, z)?.backward(&positions(&batch), false, |r, v| Ok(l1_terms(v, &batch.gt_sdf[r], scale)))?;
        Ok((fg.terms, fg.latents))
    })
}

/// Visible points first, then occluded points with their frontier weights.
struct CompletionBatch {
    pts: Vec<[f64; 3]>,
    gt: Vec<f32>,
    weights: Vec<f64>,
    visible: usize,
}

impl CompletionBatch {
    fn new(visible: &PointBatch, occluded: &PointBatch, weights: Vec<f64>) -> Self {
        let mut pts = positions(visible);
        pts.extend(positions(occluded));
        Self {
            pts,
            gt: visible.gt_sdf.clone(),
            weights,
            visible: visible.len(),
        }
    }

    /// Per-level terms and gradients for the chunk `range` of `pts`.
    fn terms<T: Scalar>(&self, range: std::ops::Range<usize>, v: &LevelValues<T>, lambda: f64) -> (Vec<f64>, LevelValues<T>) {
        let levels = v.s.len();
        let mut vis = vec![0.0; levels];
        let mut occ = vec![0.0; levels];
        let mut grad = LevelValues::zeros(levels, range.len());
        let vis_scale = 1.0 / self.visible as f64;
        let occ_scale = lambda / (self.pts.len() - self.visible).max(1) as f64;
        let sign = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        for (local, p) in range.enumerate() {
            if p < self.visible {
                for l in 0..levels {
                    let d = v.s[l][local].as_f64() - self.gt[p] as f64;
                    vis[l] += d.abs();
                    grad.s[l][local] = T::from_f64_lossy(vis_scale * sign(d));
                }
            } else {
                let w = self.weights[p - self.visible];
                for l in 1..levels {
                    let r = v.r[l][local].as_f64();
                    occ[l] += w * r.abs();
                    grad.r[l][local] = T::from_f64_lossy(occ_scale * w * sign(r));
                }
            }
        }
        let terms = vis.iter().zip(&occ).map(|(a, b)| vis_scale * a + occ_scale * b).collect();
        (terms, grad)
    }
}

/// Consistency weight in effect: zero when the model carries the
/// `no_consistency` ablation.
pub fn effective_lambda<T: Scalar>(model: &Model<T>, cfg: &LatentOptConfig) -> f64 {
    if model.config.ablations.no_consistency {
        0.0
    } else {
        cfg.lambda
    }
}

/// Index over the observed surface: visible samples within the visibility
/// tolerance of the zero level set. Falls back to every visible sample when
/// none qualifies.
pub fn frontier_index(visible: &PointBatch) -> Result<NearestNeighbors> {
    let surface: Vec<[f64; 3]> = (0..visible.len())
        .filter(|&i| (visible.gt_sdf[i] as f64).abs() < VISIBILITY_TOLERANCE)
        .map(|i| visible.position(i))
        .collect();
    if surface.is_empty() {
        NearestNeighbors::from_batch(visible)
    } else {
        NearestNeighbors::new(surface)
    }
}

/// Frontier weights of occluded points against the observed surface.
pub fn frontier_weights(visible: &NearestNeighbors, occluded: &PointBatch, sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d: Vec<f64> = (0..occluded.len())
        .into_par_iter()
        .map(|i| visible.nearest_distance(&occluded.position(i)))
        .collect();
    let w = d.iter().map(|&d| occlusion_weight(d, sigma)).collect::<Result<Vec<_>>>()?;
    Ok((d, w))
}

/// Completion objective: level 0 sees visible points only; every finer level
/// adds `λ · mean_O w(d) |R_n|` over occluded points. Returns `(L, [L_n])`.
pub fn completion_loss<T: Scalar>(
    model: &Model<T>,
    z: &LatentHierarchy<T>,
    visible: &PointBatch,
    occluded: &PointBatch,
    cfg: &LatentOptConfig,
) -> Result<(f64, Vec<f64>)> {
    let (terms, _) = completion_gradients(model, z, visible, occluded, cfg)?;
    Ok((terms.iter().sum(), terms))
}

/// Per-level completion terms and their gradients w.r.t. every latent grid.
pub fn completion_gradients<T: Scalar>(
    model: &Model<T>,
    z: &LatentHierarchy<T>,
    visible: &PointBatch,
    occluded: &PointBatch,
    cfg: &LatentOptConfig,
) -> Result<(Vec<f64>, Vec<crate::kernel::Tensor<T>>)> {
    if visible.is_empty() {
        return Err(Error::Argument("completion needs visible points".into()));
    }
    let weights = if occluded.is_empty() {
        Vec::new()
    } else {
        frontier_weights(&frontier_index(visible)?, occluded, cfg.sigma)?.1
    };
    let batch = CompletionBatch::new(visible, occluded, weights);
    let lambda = effective_lambda(model, cfg);
    let fg = Field::new(model, z)?.backward(&batch.pts, false, |r, v| Ok(batch.terms(r, v, lambda)))?;
    Ok((fg.terms, fg.latents))
}

/// Result of [`complete_from_depth`].
#[derive(Clone, Debug)]
pub struct Completion<T> {
    pub latents: LatentHierarchy<T>,
    pub log: Vec<StepLoss>,
    pub visible: PointBatch,
    pub occluded: PointBatch,
    /// Distance of each occluded pool point to the observed surface.
    pub occluded_distance: Vec<f64>,
}

/// Completes a shape from one depth image by optimizing the latent grids
/// against visible and occluded samples drawn from fixed pools.
pub fn complete_from_depth<T: Scalar>(
    model: &Model<T>,
    depth: &DepthObservation,
    shape: &Shape,
    cfg: &LatentOptConfig,
) -> Result<Completion<T>> {
    cfg.validate()?;
    let (visible, occluded) = completion_point_sets(depth, shape, cfg.visible_pool, cfg.occluded_pool, cfg.seed)?;
    let (distance, weights) = frontier_weights(&frontier_index(&visible)?, &occluded, cfg.sigma)?;
    let lambda = effective_lambda(model, cfg);
    let (latents, log) = optimize(model, cfg, |z, rng| {
        let vis = visible.draw(cfg.visible_points, rng);
        let picks: Vec<usize> = if cfg.occluded_points == 0 || occluded.is_empty() {
            Vec::new()
        } else {
            rand::seq::index::sample(rng, occluded.len(), cfg.occluded_points.min(occluded.len())).into_vec()
        };
        let occ = occluded.select(&picks);
        let w = picks.iter().map(|&i| weights[i]).collect();
        let batch = CompletionBatch::new(&vis, &occ, w);
        let fg = Field::new(model, z)?.backward(&batch.pts, false, |r, v| Ok(batch.terms(r, v, lambda)))?;
        Ok((fg.terms, fg.latents))
    })?;
    Ok(Completion {
        latents,
        log,
        visible,
        occluded,
        occluded_distance: distance,
    })
}

/// Mean fine-level residual magnitude near and far from the visible frontier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontierStats {
    /// Mean `Σ_{n>=1} |R_n|` over occluded points with `d < σ`.
    pub near_mean: f64,
    /// The same over occluded points with `d > 3σ`.
    pub far_mean: f64,
    pub near_count: usize,
    pub far_count: usize,
}

pub fn frontier_residuals<T: Scalar>(
    model: &Model<T>,
    z: &LatentHierarchy<T>,
    occluded: &PointBatch,
    distance: &[f64],
    sigma: f64,
) -> Result<FrontierStats> {
    if distance.len() != occluded.len() {
        return Err(Error::Dimension("one distance per occluded point required".into()));
    }
    let top = model.num_levels() - 1;
    let v = Field::new(model, z)?.values(&positions(occluded), top)?;
    let (mut near, mut far) = ((0.0, 0usize), (0.0, 0usize));
    for (p, &d) in distance.iter().enumerate() {
        let r: f64 = (1..=top).map(|l| v.r[l][p].as_f64().abs()).sum();
        if d < sigma {
            near.0 += r;
            near.1 += 1;
        } else if d > 3.0 * sigma {
            far.0 += r;
            far.1 += 1;
        }
    }
    let mean = |(s, c): (f64, usize)| if c == 0 { f64::NAN } else { s / c as f64 };
    Ok(FrontierStats {
        near_mean: mean(near),
        far_mean: mean(far),
        near_count: near.1,
        far_count: far.1,
    })
}
