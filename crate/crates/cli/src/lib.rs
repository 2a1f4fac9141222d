//! Command-line front end for multiresolution implicit shape models:
//! dataset generation, training, reconstruction, depth completion,
//! meshing and evaluation.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mdif_core::mesh::MeshFormat;
use mdif_core::net::Ablations;

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod manifest;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

use commands::{ReconstructArgs, ReconstructMode};

pub(crate) fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Io { path: path.into(), source })
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io { path: path.into(), source })
}

#[derive(Debug, Parser)]
#[command(name = "mdif", version, about = "Multiresolution deep implicit functions")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every stage (data, model, latent optimization, evaluation).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Record deterministic mode in the manifest. Reductions are always
    /// performed in a fixed order, so results never depend on thread count.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Latent layout such as `1x128,2x32,4x16,8x8`.
    #[arg(long, global = true)]
    pub levels: Option<String>,
    #[arg(long, global = true)]
    pub no_residual: bool,
    #[arg(long, global = true)]
    pub no_global_connection: bool,
    #[arg(long, global = true)]
    pub no_dropout: bool,
    #[arg(long, global = true)]
    pub no_consistency: bool,
    #[arg(long, global = true)]
    pub global_only: bool,
    #[arg(long, global = true)]
    pub local_only: bool,
}

impl GlobalArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            levels: self.levels.clone(),
            ablations: Ablations {
                no_residual: self.no_residual,
                no_global_connection: self.no_global_connection,
                no_dropout: self.no_dropout,
                global_only: self.global_only,
                local_only: self.local_only,
                no_consistency: self.no_consistency,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FormatArg {
    Obj,
    Ply,
}

impl From<FormatArg> for MeshFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Obj => MeshFormat::Obj,
            FormatArg::Ply => MeshFormat::Ply,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate shapes, baked grids and point sets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        shapes: Option<usize>,
    },
    /// Train (or resume training) on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint file or training output directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total iteration count to reach.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Reconstruct a shape by encoding or latent fitting, one mesh per level.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long, value_enum, default_value = "encode")]
        mode: ReconstructMode,
        /// Single level to decode; all levels when omitted.
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value = "obj")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a shape from a rendered depth image.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, value_enum, default_value = "obj")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mesh stored latents.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        /// Output mesh; `.obj` or `.ply`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two meshes (`.obj`/`.ply`) or two grids (`.grid`).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs a parsed command line. Returns the text printed on success.
pub fn run(cli: &Cli) -> CliResult<String> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), &cli.global.overrides())?;
    let det = cli.global.deterministic;
    let summary = |m: manifest::Manifest, out: &Path| {
        format!("wrote {} artifacts to {}", m.artifacts.len(), out.display())
    };
    match &cli.command {
        Command::GenData { out, shapes } => {
            if let Some(n) = shapes {
                cfg.data.shapes = *n;
            }
            cfg.validate()?;
            Ok(summary(data::cmd_gen_data(&cfg, out, det)?, out))
        }
        Command::Train { data, out, resume, iterations } => {
            if let Some(n) = iterations {
                cfg.model.iterations = *n;
            }
            let resume = resume.as_deref().map(commands::checkpoint_path);
            Ok(summary(commands::cmd_train(&cfg, data, out, resume.as_deref(), det)?, out))
        }
        Command::Reconstruct { checkpoint, shape, mode, level, resolution, steps, format, out } => {
            if let Some(r) = resolution {
                cfg.eval.mesh_res = *r;
            }
            if let Some(s) = steps {
                cfg.latopt.steps = *s;
            }
            cfg.validate()?;
            let args = ReconstructArgs {
                checkpoint: &commands::checkpoint_path(checkpoint),
                shape,
                mode: *mode,
                level: *level,
                format: (*format).into(),
                out,
            };
            Ok(summary(commands::cmd_reconstruct(&cfg, &args, det)?, out))
        }
        Command::Complete { checkpoint, shape, steps, resolution, format, out } => {
            if let Some(s) = steps {
                cfg.latopt.steps = *s;
            }
            if let Some(r) = resolution {
                cfg.eval.mesh_res = *r;
            }
            cfg.validate()?;
            let ckpt = commands::checkpoint_path(checkpoint);
            let m = commands::cmd_complete(&cfg, &ckpt, shape, (*format).into(), out, det)?;
            Ok(summary(m, out))
        }
        Command::Mesh { checkpoint, latents, level, resolution, out } => {
            if let Some(r) = resolution {
                cfg.eval.mesh_res = *r;
            }
            cfg.validate()?;
            let mesh = commands::cmd_mesh(&cfg, &commands::checkpoint_path(checkpoint), latents, *level, out)?;
            Ok(format!("wrote {} triangles to {}", mesh.triangles.len(), out.display()))
        }
        Command::Eval { pred, gt, out } => {
            let text = commands::cmd_eval(&cfg, pred, gt)?.to_string();
            if let Some(p) = out {
                write_bytes(p, text.as_bytes())?;
            }
            Ok(text.trim_end().to_string())
        }
    }
}
