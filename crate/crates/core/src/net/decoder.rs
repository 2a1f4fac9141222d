//! IM-Net style decoder MLP evaluated over batches of points.
//!
//! The decoder input is `[c, x_p]`: an optional code `c` shared by every point
//! of the batch followed by a per-point vector `x_p`. Each hidden layer sees
//! the previous activation concatenated with the input again; the scalar head
//! is linear. The shared part is folded into an effective bias once per call.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel::layers::{init_uniform, RELU_GAIN};
use crate::kernel::{leaky_relu_grad_inplace, leaky_relu_inplace, Scalar, Tensor};

/// Fully connected layer with weight `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    fn init<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: init_uniform(&[output, input], input, gain, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros_like(&self.weight),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub hidden: Vec<Dense<T>>,
    pub head: Dense<T>,
    shared_width: usize,
    point_width: usize,
}

/// Pre-activations and activations of every hidden layer, `[P, h_k]` each.
#[derive(Clone, Debug, Default)]
pub struct DecoderCache<T> {
    pre: Vec<Vec<T>>,
    act: Vec<Vec<T>>,
}

/// Gradient destinations for [`Decoder::backward`]; `None` skips the work.
pub struct DecoderGrads<'a, T> {
    pub params: Option<&'a mut Decoder<T>>,
    pub shared: Option<&'a mut [T]>,
    pub points: Option<&'a mut [T]>,
}

impl<T: Scalar> Decoder<T> {
    pub fn init<R: Rng + ?Sized>(shared_width: usize, point_width: usize, hidden: &[usize], rng: &mut R) -> Self {
        let input = shared_width + point_width;
        let mut prev = 0;
        let layers = hidden
            .iter()
            .map(|&h| {
                let d = Dense::init(prev + input, h, RELU_GAIN, rng);
                prev = h;
                d
            })
            .collect();
        Self {
            hidden: layers,
            head: Dense::init(prev, 1, 1.0, rng),
            shared_width,
            point_width,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden: self.hidden.iter().map(Dense::zeros_like).collect(),
            head: self.head.zeros_like(),
            shared_width: self.shared_width,
            point_width: self.point_width,
        }
    }

    pub fn shared_width(&self) -> usize {
        self.shared_width
    }

    pub fn point_width(&self) -> usize {
        self.point_width
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.hidden
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|d| [&d.weight, &d.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.hidden
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|d| [&mut d.weight, &mut d.bias])
    }

    /// Rebuilds a decoder from its tensors, validating the layer chaining.
    pub fn from_layers(hidden: Vec<Dense<T>>, head: Dense<T>, shared_width: usize, point_width: usize) -> Result<Self> {
        let input = shared_width + point_width;
        let mismatch = |d: &Dense<T>, expect: usize| {
            Error::Dimension(format!(
                "decoder layer {:?} does not chain (expected {expect} inputs)",
                d.weight.shape()
            ))
        };
        let mut prev = 0;
        for d in &hidden {
            if d.inputs() != prev + input || d.bias.shape() != [d.outputs()] {
                return Err(mismatch(d, prev + input));
            }
            prev = d.outputs();
        }
        if hidden.is_empty() || head.inputs() != prev || head.bias.shape() != [1] {
            return Err(mismatch(&head, prev));
        }
        if head.outputs() != 1 {
            return Err(Error::Dimension("decoder head must have one output".into()));
        }
        Ok(Self {
            hidden,
            head,
            shared_width,
            point_width,
        })
    }

    fn check_inputs(&self, shared: &[T], points: &[T], n: usize) -> Result<()> {
        if shared.len() != self.shared_width || points.len() != n * self.point_width {
            return Err(Error::Dimension(format!(
                "decoder expects {} shared + {}x{} point inputs, got {} + {}",
                self.shared_width,
                n,
                self.point_width,
                shared.len(),
                points.len()
            )));
        }
        Ok(())
    }

    /// Evaluates `n` points; `points` is `[n, point_width]` row-major.
    pub fn forward(&self, shared: &[T], points: &[T], n: usize, alpha: T, cache: &mut DecoderCache<T>) -> Result<Vec<T>> {
        self.check_inputs(shared, points, n)?;
        let (dc, dx) = (self.shared_width, self.point_width);
        cache.pre.clear();
        cache.act.clear();
        let mut prev = 0;
        for (k, layer) in self.hidden.iter().enumerate() {
            let (h, cols) = (layer.outputs(), layer.inputs());
            let w = layer.weight.data();
            let mut eff = layer.bias.data().to_vec();
            for (j, e) in eff.iter_mut().enumerate() {
                let row = &w[j * cols + prev..j * cols + prev + dc];
                *e += row.iter().zip(shared).map(|(&a, &b)| a * b).sum::<T>();
            }
            let mut pre: Vec<T> = Vec::with_capacity(n * h);
            for _ in 0..n {
                pre.extend_from_slice(&eff);
            }
            if k > 0 {
                T::gemm(n, prev, h, T::one(), &cache.act[k - 1], prev as isize, 1, w, 1, cols as isize, T::one(), &mut pre, h as isize, 1);
            }
            if dx > 0 {
                T::gemm(n, dx, h, T::one(), points, dx as isize, 1, &w[prev + dc..], 1, cols as isize, T::one(), &mut pre, h as isize, 1);
            }
            let mut act = pre.clone();
            leaky_relu_inplace(&mut act, alpha);
            cache.pre.push(pre);
            cache.act.push(act);
            prev = h;
        }
        let mut out = vec![self.head.bias.data()[0]; n];
        match cache.act.last() {
            Some(last) => T::gemm(n, prev, 1, T::one(), last, prev as isize, 1, self.head.weight.data(), 1, 1, T::one(), &mut out, 1, 1),
            None => unreachable!("decoders have at least one hidden layer"),
        }
        Ok(out)
    }

    /// Backpropagates `grad_out` (`[n]`) through the cached forward pass,
    /// accumulating into whichever destinations are present.
    pub fn backward(
        &self,
        shared: &[T],
        points: &[T],
        n: usize,
        alpha: T,
        cache: &DecoderCache<T>,
        grad_out: &[T],
        mut grads: DecoderGrads<'_, T>,
    ) -> Result<()> {
        self.check_inputs(shared, points, n)?;
        if grad_out.len() != n || cache.act.len() != self.hidden.len() {
            return Err(Error::Dimension("decoder backward does not match its forward pass".into()));
        }
        let (dc, dx) = (self.shared_width, self.point_width);
        let last = cache.act.last().unwrap();
        let hl = self.head.inputs();
        if let Some(p) = grads.params.as_deref_mut() {
            let gw = p.head.weight.data_mut();
            T::gemm(1, n, hl, T::one(), grad_out, 0, 1, last, hl as isize, 1, T::one(), gw, 0, 1);
            p.head.bias.data_mut()[0] += grad_out.iter().copied().sum::<T>();
        }
        let wh = self.head.weight.data();
        let mut da: Vec<T> = grad_out.iter().flat_map(|&g| wh.iter().map(move |&w| g * w)).collect();
        for k in (0..self.hidden.len()).rev() {
            let layer = &self.hidden[k];
            let (h, cols) = (layer.outputs(), layer.inputs());
            let prev = cols - dc - dx;
            let w = layer.weight.data();
            let mut dpre = da;
            leaky_relu_grad_inplace(&cache.pre[k], &mut dpre, alpha);
            let mut colsum = vec![T::zero(); h];
            for row in dpre.chunks_exact(h) {
                for (s, &v) in colsum.iter_mut().zip(row) {
                    *s += v;
                }
            }
            if let Some(p) = grads.params.as_deref_mut() {
                let gl = &mut p.hidden[k];
                let gw = gl.weight.data_mut();
                if k > 0 {
                    T::gemm(h, n, prev, T::one(), &dpre, 1, h as isize, &cache.act[k - 1], prev as isize, 1, T::one(), gw, cols as isize, 1);
                }
                if dx > 0 {
                    T::gemm(h, n, dx, T::one(), &dpre, 1, h as isize, points, dx as isize, 1, T::one(), &mut gw[prev + dc..], cols as isize, 1);
                }
                for (j, &s) in colsum.iter().enumerate() {
                    for (i, &c) in shared.iter().enumerate() {
                        gw[j * cols + prev + i] += s * c;
                    }
                }
                for (b, &s) in gl.bias.data_mut().iter_mut().zip(&colsum) {
                    *b += s;
                }
            }
            if let Some(gs) = grads.shared.as_deref_mut() {
                for (j, &s) in colsum.iter().enumerate() {
                    for (i, g) in gs.iter_mut().enumerate() {
                        *g += w[j * cols + prev + i] * s;
                    }
                }
            }
            if dx > 0 {
                if let Some(gp) = grads.points.as_deref_mut() {
                    T::gemm(n, h, dx, T::one(), &dpre, h as isize, 1, &w[prev + dc..], cols as isize, 1, T::one(), gp, dx as isize, 1);
                }
            }
            if k > 0 {
                let mut next = vec![T::zero(); n * prev];
                T::gemm(n, h, prev, T::one(), &dpre, h as isize, 1, w, cols as isize, 1, T::zero(), &mut next, prev as isize, 1);
                da = next;
            } else {
                da = Vec::new();
            }
        }
        Ok(())
    }

    /// Convenience single-point evaluation.
    pub fn eval(&self, shared: &[T], point: &[T], alpha: T) -> Result<T> {
        let mut cache = DecoderCache::default();
        Ok(self.forward(shared, point, 1, alpha, &mut cache)?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{grad_check, linear_fwd, leaky_relu_fwd};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn randomize(d: &mut Decoder<f64>, rng: &mut ChaCha8Rng) {
        for t in d.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    /// Reference evaluation built from the dense kernels and explicit concatenation.
    fn reference(d: &Decoder<f64>, shared: &[f64], point: &[f64], alpha: f64) -> f64 {
        let input: Vec<f64> = shared.iter().chain(point).copied().collect();
        let mut act: Vec<f64> = Vec::new();
        for layer in &d.hidden {
            let x: Vec<f64> = act.iter().chain(&input).copied().collect();
            let xt = Tensor::from_vec(&[1, x.len()], x).unwrap();
            let y = linear_fwd(&xt, &layer.weight, &layer.bias).unwrap();
            act = leaky_relu_fwd(&y, alpha).into_data();
        }
        let xt = Tensor::from_vec(&[1, act.len()], act).unwrap();
        linear_fwd(&xt, &d.head.weight, &d.head.bias).unwrap().data()[0]
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut d = Decoder::<f64>::init(4, 3, &[8, 8, 4], &mut rng);
        d.tensors_mut().for_each(|t| t.fill(0.0));
        assert_eq!(d.eval(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3], 0.02).unwrap(), 0.0);
    }

    #[test]
    fn batched_forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut d = Decoder::<f64>::init(5, 3, &[7, 6, 4], &mut rng);
        randomize(&mut d, &mut rng);
        let shared = random_vec(5, &mut rng);
        let n = 9;
        let pts = random_vec(n * 3, &mut rng);
        let mut cache = DecoderCache::default();
        let out = d.forward(&shared, &pts, n, 0.02, &mut cache).unwrap();
        for p in 0..n {
            let r = reference(&d, &shared, &pts[p * 3..p * 3 + 3], 0.02);
            assert!((out[p] - r).abs() < 1e-12, "{} vs {r}", out[p]);
        }
        assert!(d.forward(&shared, &pts[..5], n, 0.02, &mut cache).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (dc, dx) in [(4, 3), (0, 6)] {
            let mut d = Decoder::<f64>::init(dc, dx, &[6, 5, 4], &mut rng);
            randomize(&mut d, &mut rng);
            let n = 7;
            let shared = random_vec(dc, &mut rng);
            let pts = random_vec(n * dx, &mut rng);
            let probe = random_vec(n, &mut rng);
            let loss = |d: &Decoder<f64>, s: &[f64], x: &[f64]| {
                let mut c = DecoderCache::default();
                d.forward(s, x, n, 0.02, &mut c).unwrap().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut cache = DecoderCache::default();
            d.forward(&shared, &pts, n, 0.02, &mut cache).unwrap();
            let mut gp = d.zeros_like();
            let mut gs = vec![0.0; dc];
            let mut gx = vec![0.0; n * dx];
            d.backward(
                &shared,
                &pts,
                n,
                0.02,
                &cache,
                &probe,
                DecoderGrads {
                    params: Some(&mut gp),
                    shared: Some(&mut gs),
                    points: Some(&mut gx),
                },
            )
            .unwrap();
            let r = grad_check(&shared, &gs, |v| loss(&d, v, &pts));
            assert!(r.max_rel_err < 1e-6, "shared {r:?}");
            let r = grad_check(&pts, &gx, |v| loss(&d, &shared, v));
            assert!(r.max_rel_err < 1e-6, "points {r:?}");
            let grads: Vec<Tensor<f64>> = gp.tensors().cloned().collect();
            for (ti, g) in grads.iter().enumerate() {
                let base = d.tensors().nth(ti).unwrap().clone();
                let r = grad_check(base.data(), g.data(), |v| {
                    let mut dd = d.clone();
                    dd.tensors_mut().nth(ti).unwrap().data_mut().copy_from_slice(v);
                    loss(&dd, &shared, &pts)
                });
                assert!(r.max_rel_err < 1e-6, "tensor {ti}: {r:?}");
            }
        }
    }

    #[test]
    fn from_layers_checks_chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Decoder::<f32>::init(2, 3, &[4, 3], &mut rng);
        let ok = Decoder::from_layers(d.hidden.clone(), d.head.clone(), 2, 3).unwrap();
        assert_eq!(ok, d);
        assert!(Decoder::from_layers(d.hidden.clone(), d.head.clone(), 2, 4).is_err());
    }
}
