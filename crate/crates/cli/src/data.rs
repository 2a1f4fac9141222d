//! Dataset directories: shape descriptions, baked grids and point sets,
//! indexed by a manifest.

use std::collections::BTreeMap;
use std::path::Path;

use mdif_core::io::{grid_from_bytes, grid_to_bytes, points_from_bytes, points_to_bytes};
use mdif_core::net::TrainingShape;
use mdif_core::sdf::{bake_grid, random_shape, sample_near_surface, sample_uniform, PointRole, Shape};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DataConfig, RunConfig, ShapeFamily};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

/// One shape of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub name: String,
    pub shape: Shape,
    pub sample: TrainingShape,
}

/// The `count` shapes of a family, in order.
pub fn family_shapes(family: ShapeFamily, count: usize, seed: u64) -> Vec<Shape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match family {
            ShapeFamily::Random => random_shape(&mut rng),
            ShapeFamily::SphereUnionBox => Shape::sphere_union_box(),
        })
        .collect()
}

/// Point-set seeds of shape `index`, independent of the shape stream.
fn point_seeds(seed: u64, index: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    (rng.next_u64(), rng.next_u64())
}

/// Bakes the grid and draws both point sets of one shape.
pub fn make_training_shape(shape: &Shape, cfg: &DataConfig, index: usize) -> CliResult<TrainingShape> {
    let (su, sn) = point_seeds(cfg.seed, index);
    Ok(TrainingShape {
        grid: bake_grid(shape, cfg.grid_res)?,
        uniform: sample_uniform(shape, cfg.points_per_set, su)?,
        near_surface: sample_near_surface(shape, cfg.points_per_set, cfg.band, sn)?,
    })
}

pub fn generate(cfg: &DataConfig) -> CliResult<Vec<DatasetEntry>> {
    family_shapes(cfg.family, cfg.shapes, cfg.seed)
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            shape.validate()?;
            let sample = make_training_shape(&shape, cfg, i)?;
            Ok(DatasetEntry {
                name: format!("shape_{i:03}"),
                shape,
                sample,
            })
        })
        .collect()
}

/// Writes a generated dataset and its manifest into `dir`.
pub fn write_dataset(dir: &Path, entries: &[DatasetEntry], manifest: &mut Manifest) -> CliResult<()> {
    crate::create_dir(dir)?;
    for e in entries {
        manifest.write(dir, &format!("{}.json", e.name), e.shape.to_json().as_bytes())?;
        manifest.write(dir, &format!("{}.grid", e.name), &grid_to_bytes(&e.sample.grid))?;
        manifest.write(dir, &format!("{}.uniform.pts", e.name), &points_to_bytes(&e.sample.uniform))?;
        manifest.write(dir, &format!("{}.near.pts", e.name), &points_to_bytes(&e.sample.near_surface))?;
    }
    manifest.save(dir)
}

/// Loads a dataset, verifying hashes, roles, truncation and the near-surface band.
pub fn load_dataset(dir: &Path) -> CliResult<Vec<DatasetEntry>> {
    let artifacts: BTreeMap<String, String> = Manifest::read_artifacts(dir)?.into_iter().collect();
    let read = |name: &str| {
        let hash = artifacts
            .get(name)
            .ok_or_else(|| CliError::Integrity(format!("dataset manifest lacks {name}")))?;
        Manifest::read_verified(dir, name, hash)
    };
    let mut entries = Vec::new();
    for stem in artifacts.keys().filter_map(|k| k.strip_suffix(".json")) {
        let text = String::from_utf8(read(&format!("{stem}.json"))?)
            .map_err(|_| CliError::Integrity(format!("{stem}.json is not UTF-8")))?;
        let shape = Shape::from_json(&text)?;
        let grid = grid_from_bytes(&read(&format!("{stem}.grid"))?)?;
        if !grid.is_truncated() {
            return Err(CliError::Integrity(format!("{stem}.grid violates truncation")));
        }
        let uniform = points_from_bytes(&read(&format!("{stem}.uniform.pts"))?)?;
        let near_surface = points_from_bytes(&read(&format!("{stem}.near.pts"))?)?;
        for (b, role) in [(&uniform, PointRole::Uniform), (&near_surface, PointRole::NearSurface)] {
            if b.role != role {
                return Err(CliError::Integrity(format!("{stem}: expected {role:?} points, found {:?}", b.role)));
            }
            b.validate().map_err(|e| CliError::Integrity(format!("{stem}: {e}")))?;
        }
        entries.push(DatasetEntry {
            name: stem.to_string(),
            shape,
            sample: TrainingShape {
                grid,
                uniform,
                near_surface,
            },
        });
    }
    if entries.is_empty() {
        return Err(CliError::Integrity(format!("{} holds no shapes", dir.display())));
    }
    Ok(entries)
}

/// `gen-data`: generate, write and re-validate by loading back.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, deterministic: bool) -> CliResult<Manifest> {
    let entries = generate(&cfg.data)?;
    let mut manifest = Manifest::new("gen-data", cfg, deterministic);
    write_dataset(out, &entries, &mut manifest)?;
    load_dataset(out)?;
    Ok(manifest)
}
