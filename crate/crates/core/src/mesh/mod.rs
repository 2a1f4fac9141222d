//! Isosurface extraction from decoded fields and mesh file export.

mod marching;
mod tables;

use std::io::Write;

use crate::error::{Error, Result};
use crate::kernel::Scalar;
use crate::latent::LatentHierarchy;
use crate::net::{Field, Model};
use crate::sdf::ScalarGrid3;

pub use marching::{marching_cubes, DEGENERATE_EPS};
pub use tables::case_table;

/// Triangle mesh with, for each vertex, the two grid nodes of the edge it
/// was interpolated on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
    pub provenance: Vec<[u32; 2]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len() as u32;
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Format(format!("triangle {t:?} indexes past {n} vertices")));
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [[f64; 3]; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    pub fn area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt()
    }
}

/// Decodes `S_m` at every node of an `r_out³` grid over the world box.
pub fn eval_field_grid<T: Scalar>(model: &Model<T>, z: &LatentHierarchy<T>, m: usize, r_out: usize) -> Result<ScalarGrid3> {
    let template = ScalarGrid3::new(r_out, vec![0.0; r_out * r_out * r_out])?;
    let pts: Vec<[f64; 3]> = (0..r_out * r_out * r_out).map(|i| template.node_position(i)).collect();
    let values = Field::new(model, z)?.aggregate(&pts, m)?;
    ScalarGrid3::new(r_out, values.into_iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    /// Picks the format from a file extension.
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("obj") => Ok(Self::Obj),
            Some("ply") => Ok(Self::Ply),
            _ => Err(Error::Argument(format!("unknown mesh format for {}", path.display()))),
        }
    }
}

/// Serializes a mesh: ASCII OBJ with 1-based indices, or binary
/// little-endian PLY with `float` coordinates.
pub fn export_mesh(mesh: &TriMesh, format: MeshFormat) -> Result<Vec<u8>> {
    mesh.validate()?;
    let mut out = Vec::new();
    match format {
        MeshFormat::Obj => {
            for v in &mesh.vertices {
                writeln!(out, "v {} {} {}", v[0] as f32, v[1] as f32, v[2] as f32)?;
            }
            for t in &mesh.triangles {
                writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
            }
        }
        MeshFormat::Ply => {
            write!(
                out,
                "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
                mesh.vertices.len(),
                mesh.triangles.len()
            )?;
            for v in &mesh.vertices {
                for c in v {
                    out.extend_from_slice(&(*c as f32).to_le_bytes());
                }
            }
            for t in &mesh.triangles {
                out.push(3);
                for &i in t {
                    out.extend_from_slice(&(i as i32).to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

/// Reads an OBJ file (vertices and faces; polygons are fan-triangulated).
pub fn parse_obj(bytes: &[u8]) -> Result<TriMesh> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format("OBJ is not UTF-8".into()))?;
    let mut mesh = TriMesh::default();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let bad = || Error::Format(format!("OBJ line {}: `{line}`", ln + 1));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.take(3).map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad());
                }
                mesh.vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|s| {
                        let i: i64 = s.split('/').next().unwrap_or("").parse().map_err(|_| bad())?;
                        let n = mesh.vertices.len() as i64;
                        let i = if i < 0 { n + i } else { i - 1 };
                        u32::try_from(i).map_err(|_| bad())
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad());
                }
                for k in 1..idx.len() - 1 {
                    mesh.triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Reads the binary PLY layout written by [`export_mesh`].
pub fn parse_ply(bytes: &[u8]) -> Result<TriMesh> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Format("PLY header not terminated".into()))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Format("PLY header is not text".into()))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0") {
        return Err(Error::Format("only binary little-endian PLY is supported".into()));
    }
    let count = |name: &str| -> Result<usize> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(&format!("element {name} ")))
            .and_then(|n| n.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("PLY header lacks element {name}")))
    };
    let (nv, nf) = (count("vertex")?, count("face")?);
    let mut pos = end + END.len();
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::Truncated("PLY body ends early".into()))?;
        pos += n;
        Ok(s)
    };
    let mut mesh = TriMesh::default();
    for _ in 0..nv {
        let b = take(12)?;
        let f = |i: usize| f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        mesh.vertices.push([f(0), f(1), f(2)]);
    }
    for _ in 0..nf {
        if take(1)?[0] != 3 {
            return Err(Error::Format("only triangle faces are supported".into()));
        }
        let b = take(12)?;
        let i = |k: usize| i32::from_le_bytes(b[4 * k..4 * k + 4].try_into().unwrap());
        let tri = [i(0), i(1), i(2)];
        if tri.iter().any(|&v| v < 0) {
            return Err(Error::Format("negative PLY index".into()));
        }
        mesh.triangles.push(tri.map(|v| v as u32));
    }
    mesh.validate()?;
    Ok(mesh)
}
