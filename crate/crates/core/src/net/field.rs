//! Point-wise decoding of a latent hierarchy and its backward pass.
//!
//! Points are processed in fixed-size chunks. Chunks may run in parallel,
//! but their gradients are always reduced in chunk order, so results never
//! depend on the worker count.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::layers::ChainCache;
use crate::kernel::trilinear::{sample_into, scatter_into, stencil, Stencil};
use crate::kernel::{Scalar, Tensor};
use crate::latent::{GlobalConnection, LatentHierarchy};

use super::config::Aggregation;
use super::decoder::{Decoder, DecoderCache, DecoderGrads};
use super::model::{accumulate_chain, zero_chain, Model};

/// Points per chunk of the chunked evaluation.
pub const POINT_CHUNK: usize = 512;

/// Level aggregates `S_n` and residuals `R_n`, indexed `[level][point]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelValues<T> {
    pub s: Vec<Vec<T>>,
    pub r: Vec<Vec<T>>,
}

impl<T: Scalar> LevelValues<T> {
    pub fn zeros(levels: usize, points: usize) -> Self {
        Self {
            s: vec![vec![T::zero(); points]; levels],
            r: vec![vec![T::zero(); points]; levels],
        }
    }
}

/// Combines raw decoder outputs into aggregates and residuals.
pub fn aggregate<T: Scalar>(outs: &[Vec<T>], mode: Aggregation) -> LevelValues<T> {
    let mut v = LevelValues {
        s: Vec::with_capacity(outs.len()),
        r: Vec::with_capacity(outs.len()),
    };
    for (n, out) in outs.iter().enumerate() {
        match mode {
            Aggregation::Residual => {
                let s = match v.s.last() {
                    Some(prev) => prev.iter().zip(out).map(|(&a, &b)| a + b).collect(),
                    None => out.clone(),
                };
                v.s.push(s);
                v.r.push(out.clone());
            }
            Aggregation::Direct => {
                let r = if n == 0 {
                    out.clone()
                } else {
                    out.iter().zip(&outs[n - 1]).map(|(&a, &b)| a - b).collect()
                };
                v.s.push(out.clone());
                v.r.push(r);
            }
        }
    }
    v
}

/// Adjoint of [`aggregate`]: gradients of the raw outputs.
pub fn aggregate_backward<T: Scalar>(grad: &LevelValues<T>, mode: Aggregation) -> Vec<Vec<T>> {
    let levels = grad.s.len();
    let mut outs: Vec<Vec<T>> = Vec::with_capacity(levels);
    match mode {
        Aggregation::Residual => {
            let mut suffix: Option<Vec<T>> = None;
            for n in (0..levels).rev() {
                let acc = match suffix {
                    Some(s) => s.iter().zip(&grad.s[n]).map(|(&a, &b)| a + b).collect(),
                    None => grad.s[n].clone(),
                };
                outs.push(acc.iter().zip(&grad.r[n]).map(|(&a, &b)| a + b).collect());
                suffix = Some(acc);
            }
            outs.reverse();
        }
        Aggregation::Direct => {
            for n in 0..levels {
                let mut g: Vec<T> = grad.s[n].iter().zip(&grad.r[n]).map(|(&a, &b)| a + b).collect();
                if n + 1 < levels {
                    for (x, &d) in g.iter_mut().zip(&grad.r[n + 1]) {
                        *x -= d;
                    }
                }
                outs.push(g);
            }
        }
    }
    outs
}

/// Gradients produced by [`Field::backward`].
#[derive(Clone, Debug)]
pub struct FieldGrads<T> {
    /// Per-level loss terms summed over chunks.
    pub terms: Vec<f64>,
    /// Gradient for every latent grid, including the global-connection path.
    pub latents: Vec<Tensor<T>>,
    /// Decoder and global-connection weight gradients when requested.
    pub decoders: Option<Vec<Decoder<T>>>,
    pub global: Option<GlobalConnection<T>>,
}

impl<T> FieldGrads<T> {
    pub fn loss(&self) -> f64 {
        self.terms.iter().sum()
    }
}

struct ChunkGrads<T> {
    terms: Vec<f64>,
    latents: Vec<Tensor<T>>,
    hats: Vec<Option<Tensor<T>>>,
    decoders: Option<Vec<Decoder<T>>>,
}

/// A hierarchy bound to a model, with the global-connection grids computed.
pub struct Field<'a, T> {
    model: &'a Model<T>,
    z: &'a LatentHierarchy<T>,
    hats: Vec<Option<Tensor<T>>>,
    gc_caches: Vec<Option<ChainCache<T>>>,
}

impl<'a, T: Scalar> Field<'a, T> {
    pub fn new(model: &'a Model<T>, z: &'a LatentHierarchy<T>) -> Result<Self> {
        if z.spec() != model.spec() {
            return Err(Error::Dimension(format!(
                "hierarchy levels {} do not match model levels {}",
                z.spec(),
                model.spec()
            )));
        }
        let mut hats = vec![None];
        let mut gc_caches = vec![None];
        let z0 = z.grid(0);
        for n in 1..z.spec().len() {
            match model.params.global.chains.get(n - 1) {
                Some(chain) => {
                    let c0 = z0.shape()[0];
                    let (out, cache) = chain.forward(&z0.clone().reshape(&[1, c0, 1, 1, 1])?)?;
                    let s = out.shape()[1..].to_vec();
                    hats.push(Some(out.reshape(&s)?));
                    gc_caches.push(Some(cache));
                }
                None => {
                    hats.push(None);
                    gc_caches.push(None);
                }
            }
        }
        Ok(Self {
            model,
            z,
            hats,
            gc_caches,
        })
    }

    pub fn hierarchy(&self) -> &LatentHierarchy<T> {
        self.z
    }

    /// `Ẑ_n`, or `None` without a global connection.
    pub fn hat(&self, n: usize) -> Option<&Tensor<T>> {
        self.hats.get(n).and_then(Option::as_ref)
    }

    /// Decoder inputs of level `n` for a chunk: `(shared, per-point rows, stencils)`.
    fn level_inputs(&self, n: usize, pts: &[[f64; 3]]) -> (Vec<T>, Vec<T>, Vec<Stencil<T>>) {
        let grid = self.z.grid(n);
        let (c, r) = (grid.shape()[0], grid.shape()[1]);
        let cells = r * r * r;
        let dec = &self.model.params.decoders[n];
        if dec.shared_width() > 0 {
            let rows = pts.iter().flat_map(|p| p.map(T::from_f64_lossy)).collect();
            return (grid.data().to_vec(), rows, Vec::new());
        }
        let width = dec.point_width();
        let mut rows = vec![T::zero(); pts.len() * width];
        let stencils: Vec<Stencil<T>> = pts.iter().map(|&p| stencil(r, p)).collect();
        for ((p, s), row) in pts.iter().zip(&stencils).zip(rows.chunks_exact_mut(width)) {
            sample_into(grid.data(), cells, s, &mut row[..c]);
            if n == 0 {
                for (dst, &v) in row[c..].iter_mut().zip(p) {
                    *dst = T::from_f64_lossy(v);
                }
            } else if let Some(hat) = &self.hats[n] {
                sample_into(hat.data(), cells, s, &mut row[c..]);
            }
        }
        (Vec::new(), rows, stencils)
    }

    /// Raw decoder outputs of levels `0..=up_to` for a chunk.
    fn chunk_outputs(
        &self,
        pts: &[[f64; 3]],
        up_to: usize,
        mut keep: Option<&mut Vec<(Vec<T>, Vec<T>, Vec<Stencil<T>>, DecoderCache<T>)>>,
    ) -> Result<Vec<Vec<T>>> {
        let alpha = self.model.alpha();
        let mut outs = Vec::with_capacity(up_to + 1);
        for n in 0..=up_to {
            let (shared, rows, stencils) = self.level_inputs(n, pts);
            let mut cache = DecoderCache::default();
            outs.push(self.model.params.decoders[n].forward(&shared, &rows, pts.len(), alpha, &mut cache)?);
            if let Some(k) = keep.as_deref_mut() {
                k.push((shared, rows, stencils, cache));
            }
        }
        Ok(outs)
    }

    fn check_level(&self, m: usize) -> Result<()> {
        if m >= self.z.spec().len() {
            return Err(Error::Argument(format!(
                "level {m} out of range for {} levels",
                self.z.spec().len()
            )));
        }
        Ok(())
    }

    /// Raw decoder outputs for levels `0..=up_to`, `[level][point]`.
    pub fn outputs(&self, pts: &[[f64; 3]], up_to: usize) -> Result<Vec<Vec<T>>> {
        self.check_level(up_to)?;
        let parts = pts
            .par_chunks(POINT_CHUNK)
            .map(|c| self.chunk_outputs(c, up_to, None))
            .collect::<Result<Vec<_>>>()?;
        let mut outs = vec![Vec::with_capacity(pts.len()); up_to + 1];
        for part in parts {
            for (o, p) in outs.iter_mut().zip(part) {
                o.extend(p);
            }
        }
        Ok(outs)
    }

    /// Aggregates and residuals for levels `0..=up_to`.
    pub fn values(&self, pts: &[[f64; 3]], up_to: usize) -> Result<LevelValues<T>> {
        Ok(aggregate(&self.outputs(pts, up_to)?, self.model.config.aggregation()))
    }

    /// Progressive decode `S_m(x)`.
    pub fn aggregate(&self, pts: &[[f64; 3]], m: usize) -> Result<Vec<T>> {
        Ok(self.values(pts, m)?.s.pop().unwrap())
    }

    /// `R_n(x) = S_n(x) - S_{n-1}(x)`.
    pub fn residual(&self, pts: &[[f64; 3]], n: usize) -> Result<Vec<T>> {
        Ok(self.values(pts, n)?.r.pop().unwrap())
    }

    /// Evaluates every level, lets `loss` score each chunk (one term per level)
    /// and return gradients of the summed terms w.r.t. `S_n` and `R_n`, then
    /// backpropagates into the latent grids (and the network weights when
    /// `param_grads` is set).
    ///
    /// `loss` receives the index range of the chunk within `pts`.
    pub fn backward<F>(&self, pts: &[[f64; 3]], param_grads: bool, loss: F) -> Result<FieldGrads<T>>
    where
        F: Fn(Range<usize>, &LevelValues<T>) -> Result<(Vec<f64>, LevelValues<T>)> + Sync,
    {
        let ranges: Vec<Range<usize>> = (0..pts.len())
            .step_by(POINT_CHUNK)
            .map(|s| s..(s + POINT_CHUNK).min(pts.len()))
            .collect();
        let parts = ranges
            .into_par_iter()
            .map(|r| self.chunk_backward(&pts[r.clone()], r, param_grads, &loss))
            .collect::<Result<Vec<_>>>()?;
        let mut iter = parts.into_iter();
        let mut total = match iter.next() {
            Some(first) => first,
            None => self.empty_grads(param_grads),
        };
        for part in iter {
            for (a, b) in total.terms.iter_mut().zip(&part.terms) {
                *a += b;
            }
            for (a, b) in total.latents.iter_mut().zip(&part.latents) {
                a.add_assign(b)?;
            }
            for (a, b) in total.hats.iter_mut().zip(&part.hats) {
                if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                    a.add_assign(b)?;
                }
            }
            if let (Some(a), Some(b)) = (total.decoders.as_mut(), part.decoders.as_ref()) {
                for (da, db) in a.iter_mut().zip(b) {
                    for (ta, tb) in da.tensors_mut().zip(db.tensors()) {
                        ta.add_assign(tb)?;
                    }
                }
            }
        }
        let mut global = param_grads.then(|| GlobalConnection {
            chains: self.model.params.global.chains.iter().map(zero_chain).collect(),
        });
        for n in 1..self.hats.len() {
            if let (Some(dhat), Some(cache)) = (&total.hats[n], &self.gc_caches[n]) {
                let chain = &self.model.params.global.chains[n - 1];
                let mut s = vec![1];
                s.extend_from_slice(dhat.shape());
                let (dz0, layer_grads) = chain.backward(cache, &dhat.clone().reshape(&s)?)?;
                let dz0 = dz0.reshape(total.latents[0].shape())?;
                total.latents[0].add_assign(&dz0)?;
                if let Some(g) = global.as_mut() {
                    accumulate_chain(&mut g.chains[n - 1], layer_grads)?;
                }
            }
        }
        Ok(FieldGrads {
            terms: total.terms,
            latents: total.latents,
            decoders: total.decoders,
            global,
        })
    }

    fn empty_grads(&self, param_grads: bool) -> ChunkGrads<T> {
        ChunkGrads {
            terms: vec![0.0; self.z.spec().len()],
            latents: self.z.grids().iter().map(Tensor::zeros_like).collect(),
            hats: self.hats.iter().map(|h| h.as_ref().map(Tensor::zeros_like)).collect(),
            decoders: param_grads.then(|| self.model.params.decoders.iter().map(Decoder::zeros_like).collect()),
        }
    }

    fn chunk_backward<F>(&self, pts: &[[f64; 3]], range: Range<usize>, param_grads: bool, loss: &F) -> Result<ChunkGrads<T>>
    where
        F: Fn(Range<usize>, &LevelValues<T>) -> Result<(Vec<f64>, LevelValues<T>)>,
    {
        let levels = self.z.spec().len();
        let alpha = self.model.alpha();
        let mut kept = Vec::with_capacity(levels);
        let outs = self.chunk_outputs(pts, levels - 1, Some(&mut kept))?;
        let mode = self.model.config.aggregation();
        let values = aggregate(&outs, mode);
        let (terms, grad) = loss(range, &values)?;
        if terms.len() != levels || grad.s.len() != levels || grad.r.len() != levels {
            return Err(Error::Dimension("loss gradient must cover every level".into()));
        }
        let douts = aggregate_backward(&grad, mode);
        let mut g = self.empty_grads(param_grads);
        g.terms = terms;
        for (n, ((shared, rows, stencils, cache), dout)) in kept.iter().zip(&douts).enumerate() {
            let dec = &self.model.params.decoders[n];
            let grid = self.z.grid(n);
            let (c, r) = (grid.shape()[0], grid.shape()[1]);
            let cells = r * r * r;
            let global_code = dec.shared_width() > 0;
            let mut dshared = vec![T::zero(); shared.len()];
            let mut drows = if global_code { Vec::new() } else { vec![T::zero(); rows.len()] };
            dec.backward(
                shared,
                rows,
                pts.len(),
                alpha,
                cache,
                dout,
                DecoderGrads {
                    params: g.decoders.as_mut().map(|d| &mut d[n]),
                    shared: global_code.then_some(dshared.as_mut_slice()),
                    points: (!global_code).then_some(drows.as_mut_slice()),
                },
            )?;
            if global_code {
                for (a, &b) in g.latents[n].data_mut().iter_mut().zip(&dshared) {
                    *a += b;
                }
                continue;
            }
            let width = dec.point_width();
            for (s, row) in stencils.iter().zip(drows.chunks_exact(width)) {
                scatter_into(g.latents[n].data_mut(), cells, s, &row[..c]);
                if n > 0 {
                    if let Some(h) = g.hats[n].as_mut() {
                        scatter_into(h.data_mut(), cells, s, &row[c..]);
                    }
                }
            }
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::grad_check;

    #[test]
    fn aggregation_adjoint() {
        let outs = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![0.25, 3.0]];
        let gs = LevelValues {
            s: vec![vec![0.3, -0.2], vec![0.7, 0.1], vec![-0.4, 0.9]],
            r: vec![vec![0.0, 0.5], vec![-0.6, 0.2], vec![0.8, -0.3]],
        };
        for mode in [Aggregation::Residual, Aggregation::Direct] {
            let v = aggregate(&outs, mode);
            let douts = aggregate_backward(&gs, mode);
            let flat: Vec<f64> = outs.concat();
            let analytic: Vec<f64> = douts.concat();
            let r = grad_check(&flat, &analytic, |x| {
                let o: Vec<Vec<f64>> = x.chunks(2).map(<[f64]>::to_vec).collect();
                let v = aggregate(&o, mode);
                let dot = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
                    a.iter().zip(b).map(|(u, w)| u.iter().zip(w).map(|(p, q)| p * q).sum::<f64>()).sum::<f64>()
                };
                dot(&v.s, &gs.s) + dot(&v.r, &gs.r)
            });
            assert!(r.max_rel_err < 1e-8, "{mode:?} {r:?}");
            assert_eq!(v.s.len(), 3);
        }
        let v = aggregate(&outs, Aggregation::Residual);
        assert_eq!(v.s[2], vec![1.75, 4.0]);
        let v = aggregate(&outs, Aggregation::Direct);
        assert_eq!(v.r[2], vec![-0.25, 4.0]);
    }
}
