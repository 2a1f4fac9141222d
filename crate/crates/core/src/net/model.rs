//! Encoder, parameter container and the assembled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::layers::{ChainCache, ConvChain, ConvLayer, RELU_GAIN};
use crate::kernel::{ConvSpec, Scalar, Tensor};
use crate::latent::{GlobalConnection, LatentHierarchy, LevelSpec};
use crate::sdf::ScalarGrid3;

use super::config::ModelConfig;
use super::decoder::{Decoder, Dense};

/// Stride-2 convolutional trunk producing the feature grid `F`, plus one
/// head per level that maps `F` to that level's latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub trunk: ConvChain<T>,
    pub heads: Vec<ConvChain<T>>,
}

/// Activations of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    trunk: ChainCache<T>,
    heads: Vec<ChainCache<T>>,
}

impl<T: Scalar> Encoder<T> {
    fn init<R: Rng + ?Sized>(config: &ModelConfig, spec: &LevelSpec, rng: &mut R) -> Self {
        let alpha = config.leaky_slope;
        let mut cin = 1;
        let trunk_layers = config
            .encoder_channels
            .iter()
            .map(|&c| {
                let l = ConvLayer::init(cin, c, 3, ConvSpec::new(2, 1), false, RELU_GAIN, rng);
                cin = c;
                l
            })
            .collect();
        let trunk = ConvChain {
            layers: trunk_layers,
            alpha,
            activate_output: true,
        };
        let fres = config.feature_res();
        let heads = spec
            .levels()
            .iter()
            .map(|level| {
                let steps = if level.res >= fres {
                    (level.res / fres).trailing_zeros()
                } else {
                    (fres / level.res).trailing_zeros()
                } as usize;
                let total = steps + 1;
                let gain = |i: usize| if i + 1 < total { RELU_GAIN } else { 1.0 };
                let mut layers = vec![ConvLayer::init(cin, level.channels, 1, ConvSpec::new(1, 0), false, gain(0), rng)];
                for i in 1..total {
                    layers.push(ConvLayer::init(
                        level.channels,
                        level.channels,
                        2,
                        ConvSpec::new(2, 0),
                        level.res > fres,
                        gain(i),
                        rng,
                    ));
                }
                ConvChain {
                    layers,
                    alpha,
                    activate_output: false,
                }
            })
            .collect();
        Self { trunk, heads }
    }

    /// Maps a `[1, 1, r, r, r]` input to one `[c_n, r_n, r_n, r_n]` grid per level.
    pub fn forward(&self, input: &Tensor<T>) -> Result<(Vec<Tensor<T>>, EncoderCache<T>)> {
        let (feature, trunk) = self.trunk.forward(input)?;
        let mut grids = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (z, cache) = head.forward(&feature)?;
            let s = z.shape()[1..].to_vec();
            grids.push(z.reshape(&s)?);
            heads.push(cache);
        }
        Ok((grids, EncoderCache { trunk, heads }))
    }

    /// Accumulates weight gradients for upstream grid gradients into `grads`.
    pub fn backward(&self, cache: &EncoderCache<T>, grid_grads: &[Tensor<T>], grads: &mut Encoder<T>) -> Result<()> {
        let mut dfeature: Option<Tensor<T>> = None;
        for (((head, hc), g), gh) in self.heads.iter().zip(&cache.heads).zip(grid_grads).zip(&mut grads.heads) {
            let mut s = vec![1];
            s.extend_from_slice(g.shape());
            let (df, layer_grads) = head.backward(hc, &g.clone().reshape(&s)?)?;
            accumulate_chain(gh, layer_grads)?;
            match dfeature.as_mut() {
                Some(acc) => acc.add_assign(&df)?,
                None => dfeature = Some(df),
            }
        }
        if let Some(df) = dfeature {
            let (_, layer_grads) = self.trunk.backward(&cache.trunk, &df)?;
            accumulate_chain(&mut grads.trunk, layer_grads)?;
        }
        Ok(())
    }

    fn zeros_like(&self) -> Self {
        Self {
            trunk: zero_chain(&self.trunk),
            heads: self.heads.iter().map(zero_chain).collect(),
        }
    }
}

pub(crate) fn zero_chain<T: Scalar>(c: &ConvChain<T>) -> ConvChain<T> {
    let mut z = c.clone();
    z.tensors_mut().for_each(|t| t.fill(T::zero()));
    z
}

pub(crate) fn accumulate_chain<T: Scalar>(dst: &mut ConvChain<T>, grads: Vec<(Tensor<T>, Tensor<T>)>) -> Result<()> {
    for (layer, (gw, gb)) in dst.layers.iter_mut().zip(grads) {
        layer.weight.add_assign(&gw)?;
        layer.bias.add_assign(&gb)?;
    }
    Ok(())
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub encoder: Encoder<T>,
    pub global: GlobalConnection<T>,
    pub decoders: Vec<Decoder<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros_like(&self) -> Self {
        let mut global = self.global.clone();
        global.tensors_mut().for_each(|t| t.fill(T::zero()));
        Self {
            encoder: self.encoder.zeros_like(),
            global,
            decoders: self.decoders.iter().map(Decoder::zeros_like).collect(),
        }
    }

    /// Stable, human-readable tensor names in [`ModelParams::tensors`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let chain = |names: &mut Vec<String>, prefix: String, c: &ConvChain<T>| {
            for i in 0..c.layers.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        };
        chain(&mut names, "encoder.trunk".into(), &self.encoder.trunk);
        for (n, h) in self.encoder.heads.iter().enumerate() {
            chain(&mut names, format!("encoder.head{n}"), h);
        }
        for (i, c) in self.global.chains.iter().enumerate() {
            chain(&mut names, format!("global{}", i + 1), c);
        }
        for (n, d) in self.decoders.iter().enumerate() {
            for i in 0..d.hidden.len() {
                names.push(format!("decoder{n}.hidden{i}.weight"));
                names.push(format!("decoder{n}.hidden{i}.bias"));
            }
            names.push(format!("decoder{n}.head.weight"));
            names.push(format!("decoder{n}.head.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out: Vec<&Tensor<T>> = self.encoder.trunk.tensors().collect();
        for h in &self.encoder.heads {
            out.extend(h.tensors());
        }
        out.extend(self.global.tensors());
        for d in &self.decoders {
            out.extend(d.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.encoder.trunk.tensors_mut().collect();
        for h in &mut self.encoder.heads {
            out.extend(h.tensors_mut());
        }
        out.extend(self.global.tensors_mut());
        for d in &mut self.decoders {
            out.extend(d.tensors_mut());
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Names of tensors holding NaN or infinity.
    pub fn non_finite_tensors(&self) -> Vec<String> {
        self.tensor_names()
            .into_iter()
            .zip(self.tensors())
            .filter(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Overwrites every tensor from `values` (in [`ModelParams::tensors`] order).
    pub fn load_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        let mut dst = self.tensors_mut();
        if dst.len() != values.len() {
            return Err(Error::Dimension(format!(
                "model has {} tensors, got {}",
                dst.len(),
                values.len()
            )));
        }
        for (d, v) in dst.iter_mut().zip(values) {
            v.expect_shape(d.shape())?;
            **d = v;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let chain = |c: &ConvChain<T>| ConvChain {
            layers: c
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    spec: l.spec,
                    transposed: l.transposed,
                })
                .collect(),
            alpha: c.alpha,
            activate_output: c.activate_output,
        };
        let dense = |d: &Dense<T>| Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
        };
        ModelParams {
            encoder: Encoder {
                trunk: chain(&self.encoder.trunk),
                heads: self.encoder.heads.iter().map(chain).collect(),
            },
            global: GlobalConnection {
                chains: self.global.chains.iter().map(chain).collect(),
            },
            decoders: self
                .decoders
                .iter()
                .map(|d| {
                    Decoder::from_layers(
                        d.hidden.iter().map(dense).collect(),
                        dense(&d.head),
                        d.shared_width(),
                        d.point_width(),
                    )
                    .expect("cast preserves layer shapes")
                })
                .collect(),
        }
    }
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    spec: LevelSpec,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.effective_levels();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::init(config, &spec, &mut rng);
        let global = if config.uses_global_connection() {
            GlobalConnection::init(&spec, config.leaky_slope, &mut rng)?
        } else {
            GlobalConnection { chains: Vec::new() }
        };
        let decoders = spec
            .levels()
            .iter()
            .enumerate()
            .map(|(n, l)| {
                let (shared, point) = if n == 0 && l.res == 1 {
                    (l.channels, 3)
                } else if n == 0 {
                    (0, l.channels + 3)
                } else {
                    (0, 2 * l.channels)
                };
                Decoder::init(shared, point, &config.decoder_hidden, &mut rng)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            params: ModelParams {
                encoder,
                global,
                decoders,
            },
            spec,
        })
    }

    /// Reassembles a model from a configuration and stored tensors.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let mut m = Self::init(config)?;
        m.params.load_tensors(tensors)?;
        Ok(m)
    }

    pub fn spec(&self) -> &LevelSpec {
        &self.spec
    }

    pub fn num_levels(&self) -> usize {
        self.spec.len()
    }

    pub fn alpha(&self) -> T {
        T::from_f64_lossy(self.config.leaky_slope)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            spec: self.spec.clone(),
        }
    }

    fn check_grid(&self, grid: &ScalarGrid3) -> Result<()> {
        if grid.res() != self.config.input_res {
            return Err(Error::Dimension(format!(
                "encoder expects {}³ input, got {}³",
                self.config.input_res,
                grid.res()
            )));
        }
        Ok(())
    }

    /// One encoder forward pass.
    pub fn encode(&self, grid: &ScalarGrid3) -> Result<LatentHierarchy<T>> {
        Ok(self.encode_with_cache(grid)?.0)
    }

    pub fn encode_with_cache(&self, grid: &ScalarGrid3) -> Result<(LatentHierarchy<T>, EncoderCache<T>)> {
        self.check_grid(grid)?;
        let (grids, cache) = self.params.encoder.forward(&grid.to_input())?;
        Ok((LatentHierarchy::from_grids(&self.spec, grids)?, cache))
    }

    /// Level-0 decoder `D_0(z_0, x)` for a global code.
    pub fn decode_level0(&self, z0: &[T], x: [f64; 3]) -> Result<T> {
        let d = &self.params.decoders[0];
        let x = x.map(T::from_f64_lossy);
        if d.shared_width() == 0 {
            let input: Vec<T> = z0.iter().copied().chain(x).collect();
            d.eval(&[], &input, self.alpha())
        } else {
            d.eval(z0, &x, self.alpha())
        }
    }

    /// Raw decoder output `D_n(z_n, ẑ_n)` for `n >= 1`: the residual `R_n`
    /// unless the model regresses levels directly.
    pub fn decode_residual(&self, n: usize, z: &[T], zhat: &[T]) -> Result<T> {
        if n == 0 || n >= self.num_levels() {
            return Err(Error::Argument(format!("residual decoder level {n} out of range")));
        }
        let input: Vec<T> = z.iter().chain(zhat).copied().collect();
        self.params.decoders[n].eval(&[], &input, self.alpha())
    }
}
