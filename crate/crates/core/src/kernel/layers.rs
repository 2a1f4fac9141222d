//! Small compositions of the conv kernels with explicit caches.

use rand::Rng;

use crate::error::Result;

use super::{
    conv3d_bwd, conv3d_fwd, leaky_relu_grad_inplace, leaky_relu_inplace, tconv3d_bwd, tconv3d_fwd, ConvSpec,
    Scalar, Tensor,
};

/// Uniform fan-in initialisation: `±gain * sqrt(3 / fan_in)`.
pub fn init_uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

/// Gain for layers followed by a leaky ReLU.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
    pub transposed: bool,
}

impl<T: Scalar> ConvLayer<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        spec: ConvSpec,
        transposed: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let k3 = k * k * k;
        let (shape, fan_in) = if transposed {
            // Each output voxel sees cin * (k / stride)³ taps.
            let taps = (k3 / spec.stride.pow(3)).max(1);
            ([cin, cout, k, k, k], cin * taps)
        } else {
            ([cout, cin, k, k, k], cin * k3)
        };
        Self {
            weight: init_uniform(&shape, fan_in, gain, rng),
            bias: Tensor::zeros(&[cout]),
            spec,
            transposed,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            tconv3d_fwd(x, &self.weight, &self.bias, self.spec)
        } else {
            conv3d_fwd(x, &self.weight, &self.bias, self.spec)
        }
    }

    /// Returns `(grad_x, grad_weight, grad_bias)`.
    pub fn backward(&self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let g = if self.transposed {
            tconv3d_bwd(x, &self.weight, grad_out, self.spec)?
        } else {
            conv3d_bwd(x, &self.weight, grad_out, self.spec)?
        };
        Ok((g.x, g.weight, g.bias))
    }
}

/// Conv layers with leaky ReLU between them; the output is activated only
/// when `activate_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvChain<T> {
    pub layers: Vec<ConvLayer<T>>,
    pub alpha: f64,
    pub activate_output: bool,
}

/// Activations kept from [`ConvChain::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ChainCache<T> {
    /// Input of each layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor<T>>,
}

impl<T: Scalar> ConvChain<T> {
    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_output
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ChainCache<T>)> {
        let alpha = T::from_f64_lossy(self.alpha);
        let mut cache = ChainCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur)?;
            let mut out = pre.clone();
            if self.activated(i) {
                leaky_relu_inplace(out.data_mut(), alpha);
            }
            cache.inputs.push(std::mem::replace(&mut cur, out));
            cache.pre.push(pre);
        }
        Ok((cur, cache))
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates `grad_out`; returns the input gradient and per-layer
    /// `(weight, bias)` gradients.
    pub fn backward(&self, cache: &ChainCache<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>)> {
        let alpha = T::from_f64_lossy(self.alpha);
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                leaky_relu_grad_inplace(cache.pre[i].data(), g.data_mut(), alpha);
            }
            let (gx, gw, gb) = layer.backward(&cache.inputs[i], &g)?;
            grads.push((gw, gb));
            g = gx;
        }
        grads.reverse();
        Ok((g, grads))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}
