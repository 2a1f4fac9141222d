//! Marching-cubes case table, generated once from first principles.
//!
//! Corner `c` of a cell sits at offset `(c >> 2 & 1, c >> 1 & 1, c & 1)` along
//! `(x, y, z)`. For every inside/outside pattern, each cube face contributes
//! segments between its crossed edges; ambiguous faces always separate the
//! two inside corners, so neighbouring cells agree on their shared face.
//! Segments chain into closed loops, which are fan-triangulated with normals
//! pointing toward the outside.

use std::sync::OnceLock;

/// The twelve cell edges as corner pairs `(a, b)` with `a < b`.
pub const EDGES: [(usize, usize); 12] = build_edges();

const fn build_edges() -> [(usize, usize); 12] {
    let mut out = [(0, 0); 12];
    let mut n = 0;
    let mut a = 0;
    while a < 8 {
        let mut bit = 4;
        while bit > 0 {
            if a & bit == 0 {
                out[n] = (a, a | bit);
                n += 1;
            }
            bit >>= 1;
        }
        a += 1;
    }
    out
}

/// Axis (0 = x, 1 = y, 2 = z) of an edge.
pub fn edge_axis(e: usize) -> usize {
    let (a, b) = EDGES[e];
    match a ^ b {
        4 => 0,
        2 => 1,
        _ => 2,
    }
}

fn edge_between(a: usize, b: usize) -> usize {
    let (a, b) = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == (a, b)).expect("corners share an edge")
}

fn corner_offset(c: usize) -> [f64; 3] {
    [(c >> 2 & 1) as f64, (c >> 1 & 1) as f64, (c & 1) as f64]
}

/// Corners of each face in cyclic order.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::with_capacity(6);
    for bit in [4usize, 2, 1] {
        let others: Vec<usize> = [4usize, 2, 1].into_iter().filter(|&b| b != bit).collect();
        let (u, v) = (others[0], others[1]);
        for side in [0, bit] {
            out.push([side, side | u, side | u | v, side | v]);
        }
    }
    out
}

fn triangulate_case(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case >> c & 1 == 1;
    let mut partners: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for f in faces() {
        let edges: [usize; 4] = std::array::from_fn(|i| edge_between(f[i], f[(i + 1) % 4]));
        let crossed: Vec<usize> = (0..4).filter(|&i| inside(f[i]) != inside(f[(i + 1) % 4])).collect();
        let segments: Vec<(usize, usize)> = match crossed.len() {
            0 => Vec::new(),
            2 => vec![(edges[crossed[0]], edges[crossed[1]])],
            4 if inside(f[0]) => vec![(edges[3], edges[0]), (edges[1], edges[2])],
            4 => vec![(edges[0], edges[1]), (edges[2], edges[3])],
            _ => unreachable!("a face crosses an even number of edges"),
        };
        for (a, b) in segments {
            partners[a].push(b);
            partners[b].push(a);
        }
    }
    let mut used = [false; 12];
    let mut triangles = Vec::new();
    for start in 0..12 {
        if used[start] || partners[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        used[start] = true;
        let mut prev = start;
        let mut cur = partners[start][0];
        while cur != start {
            used[cur] = true;
            lp.push(cur);
            let next = if partners[cur][0] == prev { partners[cur][1] } else { partners[cur][0] };
            prev = cur;
            cur = next;
        }
        let mid = |e: usize| {
            let (a, b) = EDGES[e];
            let (pa, pb) = (corner_offset(a), corner_offset(b));
            [0, 1, 2].map(|i| 0.5 * (pa[i] + pb[i]))
        };
        let mut normal = [0.0; 3];
        for i in 0..lp.len() {
            let (p, q) = (mid(lp[i]), mid(lp[(i + 1) % lp.len()]));
            normal[0] += (p[1] - q[1]) * (p[2] + q[2]);
            normal[1] += (p[2] - q[2]) * (p[0] + q[0]);
            normal[2] += (p[0] - q[0]) * (p[1] + q[1]);
        }
        let mut outward = [0.0; 3];
        for &e in &lp {
            let (a, b) = EDGES[e];
            let (inner, outer) = if inside(a) { (a, b) } else { (b, a) };
            let (pi, po) = (corner_offset(inner), corner_offset(outer));
            for i in 0..3 {
                outward[i] += po[i] - pi[i];
            }
        }
        if (0..3).map(|i| normal[i] * outward[i]).sum::<f64>() < 0.0 {
            lp.reverse();
        }
        for i in 1..lp.len() - 1 {
            triangles.push([lp[0] as u8, lp[i] as u8, lp[i + 1] as u8]);
        }
    }
    triangles
}

/// Triangles (as local edge triples) for each of the 256 corner patterns;
/// bit `c` of the case index is set when corner `c` is inside.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate_case).collect())
}
