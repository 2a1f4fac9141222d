//! Subcommand implementations. Each writes its artifacts into an output
//! directory together with a manifest.

use std::path::{Path, PathBuf};

use mdif_core::io::{depth_to_bytes, grid_from_bytes, Checkpoint};
use mdif_core::latent::{self, LatentHierarchy};
use mdif_core::latopt::{autodecode_fit, complete_from_depth, effective_lambda, format_loss_log, frontier_residuals};
use mdif_core::mesh::{export_mesh, marching_cubes, parse_obj, parse_ply, MeshFormat, TriMesh};
use mdif_core::metrics::{chamfer_l2, f_score, occupancy_iou, EvalReport};
use mdif_core::net::{train_for, Model, TrainState};
use mdif_core::sdf::{bake_grid, render_depth, sample_near_surface, sample_uniform, Camera, Shape};

use crate::config::RunConfig;
use crate::data::load_dataset;
use crate::error::{CliError, CliResult};
use crate::evaluate::{reconstruct_mesh, region_report, sdf_error, surface_report, surface_samples, Reconstruction, Reference};
use crate::manifest::Manifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.mdif";
pub const LATENT_FILE: &str = "latents.mdifz";

/// How `reconstruct` obtains latents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ReconstructMode {
    /// One encoder forward pass on the baked grid.
    Encode,
    /// Decoder-only latent optimization on sampled points.
    Fit,
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::from_bytes(&crate::read_bytes(path)?)?)
}

pub fn load_shape(path: &Path) -> CliResult<Shape> {
    let shape = Shape::from_json(&crate::read_text(path)?)?;
    shape.validate()?;
    Ok(shape)
}

fn loss_curve(losses: &[f32]) -> String {
    losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("iteration={} loss={l:.9}\n", i + 1))
        .collect()
}

/// `train`: fresh or resumed training up to `model.iterations` total steps.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>, deterministic: bool) -> CliResult<Manifest> {
    let dataset: Vec<_> = load_dataset(data)?.into_iter().map(|e| e.sample).collect();
    let mut state = match resume {
        Some(p) => {
            let mut s = load_checkpoint(p)?.state;
            s.model.config.iterations = cfg.model.iterations;
            s
        }
        None => TrainState::new(&cfg.model)?,
    };
    let target = state.model.config.iterations as u64;
    let remaining = target.saturating_sub(state.iteration) as usize;
    train_for(&mut state, &dataset, remaining, |r| {
        if (r.iteration + 1) % 100 == 0 {
            eprintln!("iteration={} loss={:.6}", r.iteration + 1, r.loss);
        }
    })?;
    crate::create_dir(out)?;
    let mut manifest = Manifest::new("train", cfg, deterministic);
    manifest.write(out, CHECKPOINT_FILE, &Checkpoint::new(state.clone()).to_bytes())?;
    manifest.write(out, "loss.txt", loss_curve(&state.losses).as_bytes())?;
    manifest.save(out)?;
    Ok(manifest)
}

/// Observation points for auto-decoding a fully known shape.
fn fit_points(shape: &Shape, cfg: &RunConfig) -> CliResult<mdif_core::sdf::PointBatch> {
    let n = cfg.data.points_per_set;
    let mut b = sample_uniform(shape, n, cfg.latopt.seed.wrapping_add(11))?;
    b.extend(&sample_near_surface(shape, n, cfg.data.band, cfg.latopt.seed.wrapping_add(12))?);
    Ok(b)
}

/// Latents of a shape by encoding or fitting, with the fit loss log.
pub fn infer_latents(
    model: &Model<f32>,
    shape: &Shape,
    mode: ReconstructMode,
    cfg: &RunConfig,
) -> CliResult<(LatentHierarchy<f32>, Option<String>)> {
    Ok(match mode {
        ReconstructMode::Encode => (model.encode(&bake_grid(shape, model.config.input_res)?)?, None),
        ReconstructMode::Fit => {
            let (z, log) = autodecode_fit(model, &fit_points(shape, cfg)?, &cfg.latopt)?;
            (z, Some(format_loss_log(&log)))
        }
    })
}

fn check_level(model: &Model<f32>, level: usize) -> CliResult<()> {
    if level >= model.num_levels() {
        return Err(CliError::Config(format!(
            "level {level} out of range for a {}-level model",
            model.num_levels()
        )));
    }
    Ok(())
}

fn mesh_name(stem: &str, format: MeshFormat) -> String {
    match format {
        MeshFormat::Obj => format!("{stem}.obj"),
        MeshFormat::Ply => format!("{stem}.ply"),
    }
}

pub struct ReconstructArgs<'a> {
    pub checkpoint: &'a Path,
    pub shape: &'a Path,
    pub mode: ReconstructMode,
    /// `None` sweeps every level.
    pub level: Option<usize>,
    pub format: MeshFormat,
    pub out: &'a Path,
}

pub fn cmd_reconstruct(cfg: &RunConfig, a: &ReconstructArgs, deterministic: bool) -> CliResult<Manifest> {
    let model = load_checkpoint(a.checkpoint)?.state.model;
    let shape = load_shape(a.shape)?;
    let levels: Vec<usize> = match a.level {
        Some(m) => {
            check_level(&model, m)?;
            vec![m]
        }
        None => (0..model.num_levels()).collect(),
    };
    let (z, log) = infer_latents(&model, &shape, a.mode, cfg)?;
    let reference = Reference::new(&shape, &cfg.eval)?;
    crate::create_dir(a.out)?;
    let mut manifest = Manifest::new("reconstruct", cfg, deterministic);
    manifest.write(a.out, LATENT_FILE, &latent::serialize(&z))?;
    if let Some(log) = log {
        manifest.write(a.out, "fit_loss.txt", log.as_bytes())?;
    }
    for m in levels {
        let rec = reconstruct_mesh(&model, &z, m, cfg.eval.mesh_res)?;
        let mut report = surface_report(&rec, &reference, &cfg.eval)?;
        report.set("level", m as f64).set("sdf_mae", sdf_error(&model, &z, &shape, m, &cfg.eval)?);
        manifest.write(a.out, &mesh_name(&format!("mesh_level{m}"), a.format), &export_mesh(&rec.mesh, a.format)?)?;
        manifest.write(a.out, &format!("report_level{m}.txt"), report.to_string().as_bytes())?;
    }
    manifest.save(a.out)?;
    Ok(manifest)
}

pub fn camera(cfg: &RunConfig) -> CliResult<Camera> {
    let c = &cfg.camera;
    Ok(Camera::orbit(c.azimuth_deg, c.elevation_deg, c.radius, c.fov_y_deg, c.size)?)
}

/// Depth rendering, completion, meshing and region-split evaluation.
pub fn complete_shape(model: &Model<f32>, shape: &Shape, reference: &Reference, cfg: &RunConfig) -> CliResult<CompletionOutput> {
    let depth = render_depth(shape, &camera(cfg)?);
    let c = complete_from_depth(model, &depth, shape, &cfg.latopt)?;
    let top = model.num_levels() - 1;
    let rec = reconstruct_mesh(model, &c.latents, top, cfg.eval.mesh_res)?;
    let mut report = region_report(&rec, &depth, reference, &cfg.eval)?;
    let stats = frontier_residuals(model, &c.latents, &c.occluded, &c.occluded_distance, cfg.latopt.sigma)?;
    report
        .set("lambda", effective_lambda(model, &cfg.latopt))
        .set("frontier_near_residual", stats.near_mean)
        .set("frontier_far_residual", stats.far_mean)
        .set("sdf_mae", sdf_error(model, &c.latents, shape, top, &cfg.eval)?);
    Ok(CompletionOutput {
        depth,
        latents: c.latents,
        loss_log: format_loss_log(&c.log),
        reconstruction: rec,
        report,
    })
}

pub struct CompletionOutput {
    pub depth: mdif_core::sdf::DepthObservation,
    pub latents: LatentHierarchy<f32>,
    pub loss_log: String,
    pub reconstruction: Reconstruction,
    pub report: EvalReport,
}

pub fn cmd_complete(
    cfg: &RunConfig,
    checkpoint: &Path,
    shape: &Path,
    format: MeshFormat,
    out: &Path,
    deterministic: bool,
) -> CliResult<Manifest> {
    let model = load_checkpoint(checkpoint)?.state.model;
    let shape = load_shape(shape)?;
    let c = complete_shape(&model, &shape, &Reference::new(&shape, &cfg.eval)?, cfg)?;
    crate::create_dir(out)?;
    let mut manifest = Manifest::new("complete", cfg, deterministic);
    manifest.write(out, "depth.mdifd", &depth_to_bytes(&c.depth))?;
    manifest.write(out, LATENT_FILE, &latent::serialize(&c.latents))?;
    manifest.write(out, "loss.txt", c.loss_log.as_bytes())?;
    manifest.write(out, &mesh_name("mesh", format), &export_mesh(&c.reconstruction.mesh, format)?)?;
    manifest.write(out, "report.txt", c.report.to_string().as_bytes())?;
    manifest.save(out)?;
    Ok(manifest)
}

/// `mesh`: decode stored latents at a level into a mesh file.
pub fn cmd_mesh(cfg: &RunConfig, checkpoint: &Path, latents: &Path, level: Option<usize>, out: &Path) -> CliResult<TriMesh> {
    let model = load_checkpoint(checkpoint)?.state.model;
    let z: LatentHierarchy<f32> = latent::deserialize(&crate::read_bytes(latents)?)?;
    if z.spec() != model.spec() {
        return Err(CliError::Config(format!(
            "latents have layout {} but the model expects {}",
            z.spec(),
            model.spec()
        )));
    }
    let m = level.unwrap_or(model.num_levels() - 1);
    check_level(&model, m)?;
    let rec = reconstruct_mesh(&model, &z, m, cfg.eval.mesh_res)?;
    crate::write_bytes(out, &export_mesh(&rec.mesh, MeshFormat::from_path(out)?)?)?;
    Ok(rec.mesh)
}

enum EvalInput {
    Grid(mdif_core::sdf::ScalarGrid3),
    Mesh(TriMesh),
}

fn read_eval_input(path: &Path) -> CliResult<EvalInput> {
    let bytes = crate::read_bytes(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("grid") => Ok(EvalInput::Grid(grid_from_bytes(&bytes)?)),
        Some("obj") => Ok(EvalInput::Mesh(parse_obj(&bytes)?)),
        Some("ply") => Ok(EvalInput::Mesh(parse_ply(&bytes)?)),
        _ => Err(CliError::Config(format!("cannot evaluate {}: expected .grid, .obj or .ply", path.display()))),
    }
}

/// `eval`: compare two meshes or two grids.
pub fn cmd_eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> CliResult<EvalReport> {
    let (pm, gm, iou) = match (read_eval_input(pred)?, read_eval_input(gt)?) {
        (EvalInput::Grid(a), EvalInput::Grid(b)) => {
            let iou = occupancy_iou(&a, &b, 0.0)?;
            (marching_cubes(&a, 0.0), marching_cubes(&b, 0.0), Some(iou))
        }
        (EvalInput::Mesh(a), EvalInput::Mesh(b)) => (a, b, None),
        _ => return Err(CliError::Config("eval needs two grids or two meshes".into())),
    };
    let (Some(p), Some(g)) = (surface_samples(&pm, &cfg.eval)?, surface_samples(&gm, &cfg.eval)?) else {
        return Err(mdif_core::Error::DegenerateShape("cannot evaluate an empty mesh".into()).into());
    };
    let mut r = EvalReport::default();
    r.set("chamfer_l2", chamfer_l2(&p, &g)?)
        .set("f_score", f_score(&p, &g, cfg.eval.tau)?)
        .set("tau_f", cfg.eval.tau)
        .set("samples", cfg.eval.samples as f64);
    if let Some(iou) = iou {
        r.set("iou", iou);
    }
    Ok(r)
}

/// Output directory that holds a checkpoint, or the checkpoint path itself.
pub fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}
