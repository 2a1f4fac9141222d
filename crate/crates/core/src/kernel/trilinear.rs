//! Trilinear sampling of node-centred grids spanning the world box.
//!
//! A grid of resolution `r` places node `i` at `-h + i * 2h / (r - 1)` on each
//! axis, where `h` is [`BOX_HALF`](crate::BOX_HALF). Queries outside the box
//! are clamped to the border nodes. A resolution-1 grid is constant.

use crate::error::{Error, Result};
use crate::BOX_HALF;

use super::{Scalar, Tensor};

/// The eight nodes and blend weights for one query at one resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil<T> {
    /// Flat spatial indices into an `r³` grid.
    pub index: [usize; 8],
    pub weight: [T; 8],
}

/// Continuous node coordinate along one axis plus whether it was clamped.
fn axis_coord(x: f64, res: usize) -> (usize, f64, bool) {
    let span = (res - 1) as f64;
    let u = (x + BOX_HALF) / (2.0 * BOX_HALF) * span;
    let clamped = !(0.0..=span).contains(&u);
    let u = u.clamp(0.0, span);
    let i0 = (u.floor() as usize).min(res - 2);
    (i0, u - i0 as f64, clamped)
}

pub fn stencil<T: Scalar>(res: usize, p: [f64; 3]) -> Stencil<T> {
    let zero = T::zero();
    if res <= 1 {
        let mut weight = [zero; 8];
        weight[0] = T::one();
        return Stencil {
            index: [0; 8],
            weight,
        };
    }
    let (ix, tx, _) = axis_coord(p[0], res);
    let (iy, ty, _) = axis_coord(p[1], res);
    let (iz, tz, _) = axis_coord(p[2], res);
    let mut index = [0; 8];
    let mut weight = [zero; 8];
    for c in 0..8 {
        let (dx, dy, dz) = (c >> 2 & 1, c >> 1 & 1, c & 1);
        index[c] = ((ix + dx) * res + iy + dy) * res + iz + dz;
        let wx = if dx == 1 { tx } else { 1.0 - tx };
        let wy = if dy == 1 { ty } else { 1.0 - ty };
        let wz = if dz == 1 { tz } else { 1.0 - tz };
        weight[c] = T::from_f64_lossy(wx * wy * wz);
    }
    Stencil { index, weight }
}

/// Writes the `C` channel values at the stencil into `out`.
#[inline]
pub fn sample_into<T: Scalar>(grid: &[T], cells: usize, s: &Stencil<T>, out: &mut [T]) {
    for (c, o) in out.iter_mut().enumerate() {
        let base = c * cells;
        let mut acc = T::zero();
        for k in 0..8 {
            acc += s.weight[k] * grid[base + s.index[k]];
        }
        *o = acc;
    }
}

/// Adds `weight_k * g[c]` into the eight stencil nodes of each channel.
#[inline]
pub fn scatter_into<T: Scalar>(grad_grid: &mut [T], cells: usize, s: &Stencil<T>, g: &[T]) {
    for (c, &gc) in g.iter().enumerate() {
        if gc == T::zero() {
            continue;
        }
        let base = c * cells;
        for k in 0..8 {
            grad_grid[base + s.index[k]] += s.weight[k] * gc;
        }
    }
}

fn grid_dims<T: Scalar>(grid: &Tensor<T>) -> Result<(usize, usize)> {
    match *grid.shape() {
        [c, r, r2, r3] if r == r2 && r == r3 && r >= 1 => Ok((c, r)),
        _ => Err(Error::Dimension(format!(
            "latent grid must be [C, r, r, r] with r >= 1, got {:?}",
            grid.shape()
        ))),
    }
}

/// Samples every channel of `grid` (`[C, r, r, r]`) at world position `p`.
pub fn trilinear_sample<T: Scalar>(grid: &Tensor<T>, p: [f64; 3]) -> Result<Tensor<T>> {
    let (c, r) = grid_dims(grid)?;
    let s = stencil::<T>(r, p);
    let mut out = Tensor::zeros(&[c]);
    sample_into(grid.data(), r * r * r, &s, out.data_mut());
    Ok(out)
}

/// Gradient of `⟨g, sample(grid, p)⟩` with respect to the grid values.
pub fn trilinear_grid_grad<T: Scalar>(grid: &Tensor<T>, p: [f64; 3], g: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, r) = grid_dims(grid)?;
    g.expect_shape(&[c])?;
    let s = stencil::<T>(r, p);
    let mut out = Tensor::zeros_like(grid);
    scatter_into(out.data_mut(), r * r * r, &s, g.data());
    Ok(out)
}

/// Gradient of `⟨g, sample(grid, p)⟩` with respect to the query position.
/// Clamped axes contribute zero.
pub fn trilinear_query_grad<T: Scalar>(grid: &Tensor<T>, p: [f64; 3], g: &Tensor<T>) -> Result<[f64; 3]> {
    let (c, r) = grid_dims(grid)?;
    g.expect_shape(&[c])?;
    if r == 1 {
        return Ok([0.0; 3]);
    }
    let axes = [axis_coord(p[0], r), axis_coord(p[1], r), axis_coord(p[2], r)];
    let scale = (r - 1) as f64 / (2.0 * BOX_HALF);
    let cells = r * r * r;
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let d = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let idx = ((axes[0].0 + d[0]) * r + axes[1].0 + d[1]) * r + axes[2].0 + d[2];
        let w = |a: usize| if d[a] == 1 { axes[a].1 } else { 1.0 - axes[a].1 };
        let dw = |a: usize| if d[a] == 1 { 1.0 } else { -1.0 };
        let value: f64 = (0..c)
            .map(|ch| g.data()[ch].as_f64() * grid.data()[ch * cells + idx].as_f64())
            .sum();
        for a in 0..3 {
            if axes[a].2 {
                continue;
            }
            let others: f64 = (0..3).filter(|&b| b != a).map(w).product();
            out[a] += value * dw(a) * others * scale;
        }
    }
    Ok(out)
}

/// World position of node `i` along one axis of a resolution-`res` grid.
pub fn node_coord(i: usize, res: usize) -> f64 {
    if res <= 1 {
        return 0.0;
    }
    -BOX_HALF + i as f64 * (2.0 * BOX_HALF) / (res - 1) as f64
}
