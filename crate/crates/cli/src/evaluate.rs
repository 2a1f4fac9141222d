//! Mesh-level evaluation against an analytic reference shape.

use mdif_core::latent::LatentHierarchy;
use mdif_core::mesh::{eval_field_grid, marching_cubes, TriMesh};
use mdif_core::metrics::{asym_chamfer, chamfer_l2, f_score, occupancy_iou, sample_surface, EvalReport};
use mdif_core::net::{mean_abs_error, Model};
use mdif_core::sdf::{sample_near_surface, sample_uniform, DepthObservation, ScalarGrid3, Shape, Visibility, Vec3};

use crate::config::EvalConfig;
use crate::error::CliResult;

/// Ground-truth surface samples and occupancy grid of a shape.
#[derive(Clone, Debug)]
pub struct Reference {
    pub samples: Vec<[f64; 3]>,
    /// Analytic SDF at the reconstruction resolution.
    pub grid: ScalarGrid3,
}

impl Reference {
    pub fn new(shape: &Shape, cfg: &EvalConfig) -> CliResult<Self> {
        let fine = ScalarGrid3::from_fn(cfg.gt_res, |p| shape.eval_at(p))?;
        let mesh = marching_cubes(&fine, 0.0);
        Ok(Self {
            samples: sample_surface(&mesh, cfg.samples, cfg.seed.wrapping_add(1))?,
            grid: ScalarGrid3::from_fn(cfg.mesh_res, |p| shape.eval_at(p))?,
        })
    }
}

/// A decoded field grid and its zero-level mesh.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub grid: ScalarGrid3,
    pub mesh: TriMesh,
}

pub fn reconstruct_mesh(model: &Model<f32>, z: &LatentHierarchy<f32>, level: usize, res: usize) -> CliResult<Reconstruction> {
    let grid = eval_field_grid(model, z, level, res)?;
    let mesh = marching_cubes(&grid, 0.0);
    Ok(Reconstruction { grid, mesh })
}

/// Surface samples of a reconstruction, or `None` for an empty mesh.
pub fn surface_samples(mesh: &TriMesh, cfg: &EvalConfig) -> CliResult<Option<Vec<[f64; 3]>>> {
    if mesh.is_empty() {
        return Ok(None);
    }
    Ok(Some(sample_surface(mesh, cfg.samples, cfg.seed)?))
}

/// Chamfer, F-score and IoU of a reconstruction. An empty mesh scores an
/// infinite Chamfer distance and zero F-score.
pub fn surface_report(rec: &Reconstruction, reference: &Reference, cfg: &EvalConfig) -> CliResult<EvalReport> {
    let mut r = EvalReport::default();
    match surface_samples(&rec.mesh, cfg)? {
        Some(pred) => {
            r.set("chamfer_l2", chamfer_l2(&pred, &reference.samples)?)
                .set("f_score", f_score(&pred, &reference.samples, cfg.tau)?);
        }
        None => {
            r.set("chamfer_l2", f64::INFINITY).set("f_score", 0.0);
        }
    }
    r.set("iou", occupancy_iou(&rec.grid, &reference.grid, 0.0)?)
        .set("tau_f", cfg.tau)
        .set("samples", cfg.samples as f64)
        .set("triangles", rec.mesh.triangles.len() as f64);
    Ok(r)
}

/// Mean `|S_m - S̄|` on fresh uniform and near-surface samples.
pub fn sdf_error(model: &Model<f32>, z: &LatentHierarchy<f32>, shape: &Shape, level: usize, cfg: &EvalConfig) -> CliResult<f64> {
    let n = cfg.sdf_points.div_ceil(2);
    let mut batch = sample_uniform(shape, n, cfg.seed.wrapping_add(2))?;
    batch.extend(&sample_near_surface(shape, cfg.sdf_points - n, mdif_core::sdf::NEAR_SURFACE_BAND, cfg.seed.wrapping_add(3))?);
    Ok(mean_abs_error(model, z, &batch, level)?)
}

/// Region-split Chamfer terms of a completion: observed depth points to the
/// reconstruction, and hidden ground-truth surface to the reconstruction.
pub fn region_report(rec: &Reconstruction, depth: &DepthObservation, reference: &Reference, cfg: &EvalConfig) -> CliResult<EvalReport> {
    let mut r = surface_report(rec, reference, cfg)?;
    let hidden: Vec<[f64; 3]> = reference
        .samples
        .iter()
        .copied()
        .filter(|p| depth.classify(&Vec3::from(*p)) == Visibility::Occluded)
        .collect();
    let hits = depth.hit_points();
    let pred = surface_samples(&rec.mesh, cfg)?;
    let asym = |from: &[[f64; 3]]| -> CliResult<f64> {
        Ok(match (&pred, from.is_empty()) {
            (_, true) => f64::NAN,
            (None, false) => f64::INFINITY,
            (Some(p), false) => asym_chamfer(from, p)?,
        })
    };
    r.set("visible_asym_chamfer", asym(&hits)?)
        .set("occluded_asym_chamfer", asym(&hidden)?)
        .set("visible_samples", hits.len() as f64)
        .set("occluded_samples", hidden.len() as f64);
    Ok(r)
}
