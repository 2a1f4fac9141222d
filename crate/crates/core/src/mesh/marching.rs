//! Zero-level-set extraction.

use rayon::prelude::*;

use crate::sdf::ScalarGrid3;

use super::tables::{case_table, edge_axis, EDGES};
use super::TriMesh;

/// Triangles with an edge shorter than this are dropped.
pub const DEGENERATE_EPS: f64 = 1e-9;

/// Marching cubes over a node-centred grid; a node is inside when its value
/// is below `iso`. Vertices are shared between cells through their grid edge.
pub fn marching_cubes(grid: &ScalarGrid3, iso: f64) -> TriMesh {
    let r = grid.res();
    let values = grid.values();
    let inside = |i: usize| (values[i] as f64) < iso;
    let node = |i: usize, j: usize, k: usize| (i * r + j) * r + k;
    let stride = [r * r, r, 1];

    let mut vertex_of = vec![u32::MAX; 3 * r * r * r];
    let mut mesh = TriMesh::default();
    for n in 0..r * r * r {
        let ijk = [n / (r * r), n / r % r, n % r];
        for axis in 0..3 {
            if ijk[axis] + 1 >= r {
                continue;
            }
            let m = n + stride[axis];
            if inside(n) == inside(m) {
                continue;
            }
            let (va, vb) = (values[n] as f64, values[m] as f64);
            let t = ((iso - va) / (vb - va)).clamp(0.0, 1.0);
            let (pa, pb) = (grid.node_position(n), grid.node_position(m));
            vertex_of[3 * n + axis] = mesh.vertices.len() as u32;
            mesh.vertices.push([0, 1, 2].map(|i| pa[i] + t * (pb[i] - pa[i])));
            mesh.provenance.push([n as u32, m as u32]);
        }
    }

    let table = case_table();
    let slabs: Vec<Vec<[u32; 3]>> = (0..r.saturating_sub(1))
        .into_par_iter()
        .map(|i| {
            let mut tris = Vec::new();
            for j in 0..r - 1 {
                for k in 0..r - 1 {
                    let corner = |c: usize| node(i + (c >> 2 & 1), j + (c >> 1 & 1), k + (c & 1));
                    let case = (0..8).filter(|&c| inside(corner(c))).fold(0, |acc, c| acc | 1 << c);
                    for t in &table[case] {
                        let ids = t.map(|e| {
                            let (a, _) = EDGES[e as usize];
                            vertex_of[3 * corner(a) + edge_axis(e as usize)]
                        });
                        let p = ids.map(|v| mesh.vertices[v as usize]);
                        let len = |a: [f64; 3], b: [f64; 3]| {
                            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                        };
                        if len(p[0], p[1]) < DEGENERATE_EPS
                            || len(p[1], p[2]) < DEGENERATE_EPS
                            || len(p[2], p[0]) < DEGENERATE_EPS
                        {
                            continue;
                        }
                        tris.push(ids);
                    }
                }
            }
            tris
        })
        .collect();
    mesh.triangles = slabs.concat();
    mesh
}
