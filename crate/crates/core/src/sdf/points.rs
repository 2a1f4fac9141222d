//! Training point sets: uniform box samples and near-surface samples.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{BOX_HALF, TRUNCATION};

use super::{Shape, Vec3};

/// Half-width of the near-surface band.
pub const NEAR_SURFACE_BAND: f64 = 0.04;

/// Standard deviation of the jitter added after projecting onto the surface.
pub const NEAR_SURFACE_JITTER: f64 = 0.02;

/// Consecutive rejections tolerated before a shape is declared degenerate.
pub const MAX_REJECTIONS: u64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointRole {
    Uniform,
    NearSurface,
    Visible,
    Occluded,
}

impl PointRole {
    pub fn code(self) -> u32 {
        match self {
            PointRole::Uniform => 0,
            PointRole::NearSurface => 1,
            PointRole::Visible => 2,
            PointRole::Occluded => 3,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => PointRole::Uniform,
            1 => PointRole::NearSurface,
            2 => PointRole::Visible,
            3 => PointRole::Occluded,
            _ => return Err(Error::Format(format!("unknown point role {code}"))),
        })
    }
}

/// Positions with truncated ground-truth SDF values.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    pub role: PointRole,
    pub positions: Vec<[f32; 3]>,
    pub gt_sdf: Vec<f32>,
}

impl PointBatch {
    pub fn new(role: PointRole, positions: Vec<[f32; 3]>, gt_sdf: Vec<f32>) -> Result<Self> {
        if positions.len() != gt_sdf.len() {
            return Err(Error::Dimension(format!(
                "{} positions but {} SDF values",
                positions.len(),
                gt_sdf.len()
            )));
        }
        Ok(Self {
            role,
            positions,
            gt_sdf,
        })
    }

    pub fn empty(role: PointRole) -> Self {
        Self {
            role,
            positions: Vec::new(),
            gt_sdf: Vec::new(),
        }
    }

    /// Labels `positions` with the truncated SDF of `shape`.
    pub fn labelled(role: PointRole, shape: &Shape, positions: Vec<[f32; 3]>) -> Self {
        let gt_sdf = positions.par_iter().map(|&p| truncated_sdf(shape, p)).collect();
        Self {
            role,
            positions,
            gt_sdf,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> [f64; 3] {
        self.positions[i].map(f64::from)
    }

    /// `n` points drawn at random; without replacement when possible.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointBatch {
        let picks: Vec<usize> = if n <= self.len() {
            index::sample(rng, self.len(), n).into_vec()
        } else {
            (0..n).map(|_| rng.random_range(0..self.len())).collect()
        };
        self.select(&picks)
    }

    pub fn select(&self, picks: &[usize]) -> PointBatch {
        PointBatch {
            role: self.role,
            positions: picks.iter().map(|&i| self.positions[i]).collect(),
            gt_sdf: picks.iter().map(|&i| self.gt_sdf[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &PointBatch) {
        self.positions.extend_from_slice(&other.positions);
        self.gt_sdf.extend_from_slice(&other.gt_sdf);
    }

    /// Checks box containment, truncation and the near-surface band.
    pub fn validate(&self) -> Result<()> {
        let half = BOX_HALF as f32;
        let t = TRUNCATION as f32;
        for (i, (p, &s)) in self.positions.iter().zip(&self.gt_sdf).enumerate() {
            if p.iter().any(|c| !c.is_finite() || c.abs() > half) {
                return Err(Error::Format(format!("point {i} outside the world box")));
            }
            if !s.is_finite() || s.abs() > t {
                return Err(Error::Format(format!("point {i} violates truncation")));
            }
            if self.role == PointRole::NearSurface && s.abs() >= NEAR_SURFACE_BAND as f32 {
                return Err(Error::Format(format!("near-surface point {i} outside the band")));
            }
        }
        Ok(())
    }
}

pub fn truncated_sdf(shape: &Shape, p: [f32; 3]) -> f32 {
    shape
        .eval_at(p.map(f64::from))
        .clamp(-TRUNCATION, TRUNCATION) as f32
}

pub(crate) fn uniform_point<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [0; 3].map(|_| rng.random_range(-BOX_HALF..BOX_HALF) as f32)
}

/// `n` i.i.d. uniform points in the box.
pub fn sample_uniform(shape: &Shape, n: usize, seed: u64) -> Result<PointBatch> {
    if n == 0 {
        return Err(Error::Argument("sample_uniform needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..n).map(|_| uniform_point(&mut rng)).collect();
    Ok(PointBatch::labelled(PointRole::Uniform, shape, positions))
}

/// `n` points with `|S| < band`: uniform seeds pulled onto the surface with
/// two Newton steps along the gradient, jittered, then rejection-filtered.
pub fn sample_near_surface(shape: &Shape, n: usize, band: f64, seed: u64) -> Result<PointBatch> {
    if !(band > 0.0) {
        return Err(Error::DegenerateShape(format!("near-surface band {band} admits no points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, NEAR_SURFACE_JITTER).expect("valid sigma");
    let half = BOX_HALF as f32;
    let mut positions = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n);
    let mut misses = 0u64;
    while positions.len() < n {
        let mut p = Vec3::from(uniform_point(&mut rng).map(f64::from));
        for _ in 0..2 {
            let g = shape.gradient(&p);
            let g2 = g.norm_squared();
            if g2 > 1e-12 {
                p -= g * (shape.eval(&p) / g2);
            }
        }
        let offset = Vec3::from([0; 3].map(|_| jitter.sample(&mut rng)));
        let q = (p + offset).map(|v| v as f32);
        let q = [q.x, q.y, q.z];
        let s = shape.eval_at(q.map(f64::from));
        if q.iter().all(|c| c.abs() <= half) && s.abs() < band && (s.abs() as f32) < band as f32 {
            positions.push(q);
            gt.push(s.clamp(-TRUNCATION, TRUNCATION) as f32);
            misses = 0;
        } else {
            misses += 1;
            if misses >= MAX_REJECTIONS {
                return Err(Error::DegenerateShape(format!(
                    "{MAX_REJECTIONS} consecutive near-surface rejections"
                )));
            }
        }
    }
    PointBatch::new(PointRole::NearSurface, positions, gt)
}
