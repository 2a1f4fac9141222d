//! The multiresolution latent hierarchy: per-level latent grids, code lookup,
//! the global connection and the binary latent container.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::ByteReader;
use crate::kernel::layers::{ConvChain, ConvLayer, RELU_GAIN};
use crate::kernel::{apply_mask, dropout_cells, trilinear_sample, ConvSpec, Scalar, Tensor};

/// Spatial resolution and channel count of one level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Level {
    pub res: usize,
    pub channels: usize,
}

impl Level {
    pub fn cells(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn scalars(&self) -> usize {
        self.cells() * self.channels
    }
}

/// Ordered list of latent grid shapes, coarse to fine.
///
/// Either level 0 is a single global code (`1³`) followed by strictly finer
/// grids, or the spec is a single local grid (the local-only baseline).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LevelSpec {
    levels: Vec<Level>,
}

impl LevelSpec {
    pub fn new(levels: Vec<(usize, usize)>) -> Result<Self> {
        let levels: Vec<Level> = levels
            .into_iter()
            .map(|(res, channels)| Level { res, channels })
            .collect();
        if levels.is_empty() {
            return Err(Error::Spec("level spec needs at least one level".into()));
        }
        if levels.iter().any(|l| l.res == 0 || l.channels == 0) {
            return Err(Error::Spec("level resolutions and channels must be positive".into()));
        }
        if levels[0].res != 1 && levels.len() > 1 {
            return Err(Error::Spec("level 0 must be a single 1³ code when finer levels exist".into()));
        }
        if levels.windows(2).any(|w| w[1].res <= w[0].res) {
            return Err(Error::Spec("level resolutions must strictly increase".into()));
        }
        Ok(Self { levels })
    }

    /// Five levels `[1³×512, 2³×64, 4³×32, 8³×16, 16³×8]`.
    pub fn full_scale() -> Self {
        Self::new(vec![(1, 512), (2, 64), (4, 32), (8, 16), (16, 8)]).unwrap()
    }

    /// Four levels `[1³×128, 2³×32, 4³×16, 8³×8]`.
    pub fn desk() -> Self {
        Self::new(vec![(1, 128), (2, 32), (4, 16), (8, 8)]).unwrap()
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, n: usize) -> Result<Level> {
        self.levels
            .get(n)
            .copied()
            .ok_or_else(|| Error::Argument(format!("level {n} out of range for {} levels", self.len())))
    }

    /// Whether level 0 is a single global code.
    pub fn has_global_code(&self) -> bool {
        self.levels[0].res == 1
    }

    pub fn scalar_count(&self) -> usize {
        self.levels.iter().map(Level::scalars).sum()
    }

    pub fn global_only(&self) -> Self {
        Self {
            levels: vec![self.levels[0]],
        }
    }

    pub fn local_only(&self) -> Self {
        Self {
            levels: vec![*self.levels.last().unwrap()],
        }
    }
}

impl fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.levels.iter().map(|l| format!("{}x{}", l.res, l.channels)).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LevelSpec {
    type Err = Error;

    /// Parses `"1x128,2x32,4x16,8x8"` (resolution × channels per level).
    fn from_str(s: &str) -> Result<Self> {
        let levels = s
            .split(',')
            .map(|part| {
                let (r, c) = part
                    .trim()
                    .split_once(['x', 'X'])
                    .ok_or_else(|| Error::Spec(format!("level `{part}` is not RxC")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Spec(format!("bad number in level `{part}`")))
                };
                Ok((parse(r)?, parse(c)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

impl TryFrom<String> for LevelSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LevelSpec> for String {
    fn from(spec: LevelSpec) -> String {
        spec.to_string()
    }
}

/// Latent grids `Z_n` of shape `[c_n, r_n, r_n, r_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHierarchy<T> {
    spec: LevelSpec,
    grids: Vec<Tensor<T>>,
}

impl<T: Scalar> LatentHierarchy<T> {
    pub fn zeros(spec: &LevelSpec) -> Self {
        let grids = spec
            .levels()
            .iter()
            .map(|l| Tensor::zeros(&[l.channels, l.res, l.res, l.res]))
            .collect();
        Self {
            spec: spec.clone(),
            grids,
        }
    }

    pub fn from_grids(spec: &LevelSpec, grids: Vec<Tensor<T>>) -> Result<Self> {
        if grids.len() != spec.len() {
            return Err(Error::Dimension(format!(
                "{} grids for {} levels",
                grids.len(),
                spec.len()
            )));
        }
        for (g, l) in grids.iter().zip(spec.levels()) {
            g.expect_shape(&[l.channels, l.res, l.res, l.res])?;
        }
        Ok(Self {
            spec: spec.clone(),
            grids,
        })
    }

    pub fn spec(&self) -> &LevelSpec {
        &self.spec
    }

    pub fn grids(&self) -> &[Tensor<T>] {
        &self.grids
    }

    pub fn grids_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.grids
    }

    pub fn grid(&self, n: usize) -> &Tensor<T> {
        &self.grids[n]
    }

    pub fn scalar_count(&self) -> usize {
        self.grids.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.grids.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> LatentHierarchy<U> {
        LatentHierarchy {
            spec: self.spec.clone(),
            grids: self.grids.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        self.grids.iter_mut().for_each(|g| g.scale(s));
    }

    /// All values, level by level.
    pub fn flatten(&self) -> Vec<T> {
        self.grids.iter().flat_map(|g| g.data().iter().copied()).collect()
    }

    pub fn from_flat(spec: &LevelSpec, values: &[T]) -> Result<Self> {
        if values.len() != spec.scalar_count() {
            return Err(Error::Dimension(format!(
                "{} values for a hierarchy of {}",
                values.len(),
                spec.scalar_count()
            )));
        }
        let mut offset = 0;
        let grids = spec
            .levels()
            .iter()
            .map(|l| {
                let g = Tensor::from_vec(
                    &[l.channels, l.res, l.res, l.res],
                    values[offset..offset + l.scalars()].to_vec(),
                );
                offset += l.scalars();
                g
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec: spec.clone(),
            grids,
        })
    }

    /// Code `z_n(x)`: the global code itself at a `1³` level, otherwise the
    /// trilinear blend of the level's grid.
    pub fn latent_at(&self, n: usize, x: [f64; 3]) -> Result<Tensor<T>> {
        self.spec.level(n)?;
        trilinear_sample(&self.grids[n], x)
    }
}

/// Same as [`LatentHierarchy::zeros`].
pub fn zero_hierarchy<T: Scalar>(spec: &LevelSpec) -> LatentHierarchy<T> {
    LatentHierarchy::zeros(spec)
}

/// Per-level keep masks produced by [`dropout_hierarchy`]; `None` for levels
/// that are never dropped.
pub type DropoutMasks = Vec<Option<Vec<bool>>>;

/// Cell dropout on every level `n >= 1`; level 0 is returned untouched.
pub fn dropout_hierarchy<T: Scalar, R: Rng + ?Sized>(
    z: &LatentHierarchy<T>,
    rate: f64,
    rng: &mut R,
) -> Result<(LatentHierarchy<T>, DropoutMasks)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1]")));
    }
    let mut grids = Vec::with_capacity(z.grids.len());
    let mut masks = Vec::with_capacity(z.grids.len());
    for (n, g) in z.grids.iter().enumerate() {
        if n == 0 {
            grids.push(g.clone());
            masks.push(None);
        } else {
            let (dropped, keep) = dropout_cells(g, rate, rng)?;
            grids.push(dropped);
            masks.push(Some(keep));
        }
    }
    Ok((
        LatentHierarchy {
            spec: z.spec.clone(),
            grids,
        },
        masks,
    ))
}

/// Zeroes gradient entries of dropped cells.
pub fn mask_gradients<T: Scalar>(grads: &mut [Tensor<T>], masks: &DropoutMasks) {
    for (g, m) in grads.iter_mut().zip(masks) {
        if let Some(keep) = m {
            let channels = g.shape()[0];
            apply_mask(g.data_mut(), channels, keep);
        }
    }
}

/// Transposed-convolution chains that upsample the global code `z_0` to a
/// grid `Ẑ_n` with the resolution and channel count of each level `n >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalConnection<T> {
    /// Index `n - 1` holds the chain for level `n`.
    pub chains: Vec<ConvChain<T>>,
}

impl<T: Scalar> GlobalConnection<T> {
    /// One stride-2 `2³` transposed convolution per factor of two.
    pub fn init<R: Rng + ?Sized>(spec: &LevelSpec, alpha: f64, rng: &mut R) -> Result<Self> {
        if !spec.has_global_code() {
            return Ok(Self { chains: Vec::new() });
        }
        let c0 = spec.levels()[0].channels;
        let mut chains = Vec::new();
        for level in &spec.levels()[1..] {
            if !level.res.is_power_of_two() {
                return Err(Error::Spec(format!(
                    "global connection needs power-of-two resolutions, got {}",
                    level.res
                )));
            }
            let steps = level.res.trailing_zeros() as usize;
            let layers = (0..steps)
                .map(|i| {
                    let cin = if i == 0 { c0 } else { level.channels };
                    let gain = if i + 1 < steps { RELU_GAIN } else { 1.0 };
                    ConvLayer::init(cin, level.channels, 2, ConvSpec::new(2, 0), true, gain, rng)
                })
                .collect();
            chains.push(ConvChain {
                layers,
                alpha,
                activate_output: false,
            });
        }
        Ok(Self { chains })
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.chains.iter().flat_map(|c| c.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.chains.iter_mut().flat_map(|c| c.tensors_mut())
    }
}

/// Upsamples the `[c_0, 1, 1, 1]` global code into `Ẑ_n` (`[c_n, r_n, r_n, r_n]`).
pub fn global_connection<T: Scalar>(z0: &Tensor<T>, params: &GlobalConnection<T>, n: usize) -> Result<Tensor<T>> {
    if n == 0 {
        return Err(Error::Argument("global connection is defined for levels n >= 1".into()));
    }
    let chain = params
        .chains
        .get(n - 1)
        .ok_or_else(|| Error::Argument(format!("no global connection for level {n}")))?;
    let c0 = z0.shape()[0];
    let out = chain.apply(&z0.clone().reshape(&[1, c0, 1, 1, 1])?)?;
    let s = out.shape().to_vec();
    out.reshape(&s[1..])
}

/// `ẑ_n(x)`: trilinear sample of an upsampled grid.
pub fn hat_latent_at<T: Scalar>(hat: &Tensor<T>, x: [f64; 3]) -> Result<Tensor<T>> {
    trilinear_sample(hat, x)
}

const LATENT_MAGIC: &[u8; 4] = b"MDIF";
const LATENT_VERSION: u32 = 1;

/// Encodes a hierarchy as `MDIF`, version, level count, `(res, channels)`
/// per level, then little-endian `f32` values level by level.
pub fn serialize<T: Scalar>(z: &LatentHierarchy<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * z.spec.len() + 4 * z.scalar_count());
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    out.extend_from_slice(&(z.spec.len() as u32).to_le_bytes());
    for l in z.spec.levels() {
        out.extend_from_slice(&(l.res as u32).to_le_bytes());
        out.extend_from_slice(&(l.channels as u32).to_le_bytes());
    }
    for g in &z.grids {
        for &v in g.data() {
            out.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
        }
    }
    out
}

pub fn deserialize<T: Scalar>(bytes: &[u8]) -> Result<LatentHierarchy<T>> {
    let mut r = ByteReader::new(bytes, "latent container");
    if r.take(4)? != LATENT_MAGIC {
        return Err(Error::Format("not a latent container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != LATENT_VERSION {
        return Err(Error::Format(format!("unsupported latent container version {version}")));
    }
    let n = r.u32()? as usize;
    if n == 0 || n > 64 {
        return Err(Error::Format(format!("implausible level count {n}")));
    }
    let levels = (0..n)
        .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
        .collect::<Result<Vec<_>>>()?;
    let spec = LevelSpec::new(levels).map_err(|e| Error::Format(e.to_string()))?;
    let payload = r.take(4 * spec.scalar_count())?;
    let values: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::from_f32(f32::from_le_bytes(c.try_into().unwrap())).unwrap())
        .collect();
    r.finish()?;
    LatentHierarchy::from_flat(&spec, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{grad_check, trilinear_grid_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_hierarchy(spec: &LevelSpec, rng: &mut ChaCha8Rng) -> LatentHierarchy<f64> {
        let v: Vec<f64> = (0..spec.scalar_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        LatentHierarchy::from_flat(spec, &v).unwrap()
    }

    #[test]
    fn scalar_counts() {
        assert_eq!(LevelSpec::full_scale().scalar_count(), 44032);
        assert_eq!(LevelSpec::desk().scalar_count(), 5504);
        let z = zero_hierarchy::<f32>(&LevelSpec::full_scale());
        assert_eq!(z.scalar_count(), 44032);
        assert!(z.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(LevelSpec::new(vec![]).is_err());
        assert!(LevelSpec::new(vec![(1, 4), (4, 2), (2, 2)]).is_err());
        assert!(LevelSpec::new(vec![(2, 4), (4, 2)]).is_err());
        assert!(LevelSpec::new(vec![(8, 8)]).is_ok());
        let s: LevelSpec = "1x128, 2x32,4x16,8x8".parse().unwrap();
        assert_eq!(s, LevelSpec::desk());
        assert_eq!(s.to_string().parse::<LevelSpec>().unwrap(), s);
        assert_eq!(s.global_only().to_string(), "1x128");
        assert_eq!(s.local_only().to_string(), "8x8");
    }

    #[test]
    fn level_zero_code_ignores_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_hierarchy(&LevelSpec::desk(), &mut rng);
        let a = z.latent_at(0, [0.1, -0.3, 0.5]).unwrap();
        let b = z.latent_at(0, [-0.6, 0.2, 0.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), z.grid(0).data());
        assert!(z.latent_at(4, [0.0; 3]).is_err());
    }

    #[test]
    fn constant_level_gives_constant_code() {
        let spec = LevelSpec::desk();
        let mut grids: Vec<Tensor<f64>> = LatentHierarchy::zeros(&spec).grids().to_vec();
        grids[2].fill(0.25);
        let z = LatentHierarchy::from_grids(&spec, grids).unwrap();
        let code = z.latent_at(2, [0.33, -0.1, 0.6]).unwrap();
        assert!(code.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn latent_lookup_is_linear_and_differentiable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = LevelSpec::desk();
        let z = random_hierarchy(&spec, &mut rng);
        let x = [0.21, -0.47, 0.05];
        for n in 0..spec.len() {
            let mut scaled = z.clone();
            scaled.scale(-2.5);
            let a = z.latent_at(n, x).unwrap();
            let b = scaled.latent_at(n, x).unwrap();
            for (u, v) in a.data().iter().zip(b.data()) {
                assert!((v - -2.5 * u).abs() <= 1e-6 * u.abs().max(1.0));
            }
            let probe = Tensor::full(&[spec.levels()[n].channels], 0.7);
            let g = trilinear_grid_grad(z.grid(n), x, &probe).unwrap();
            let r = grad_check(z.grid(n).data(), g.data(), |v| {
                trilinear_sample(&Tensor::from_vec(z.grid(n).shape(), v.to_vec()).unwrap(), x)
                    .unwrap()
                    .dot(&probe)
                    .unwrap()
            });
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn global_connection_shapes_and_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = LevelSpec::full_scale();
        let gc = GlobalConnection::<f32>::init(&spec, 0.02, &mut rng).unwrap();
        let z0 = Tensor::zeros(&[512, 1, 1, 1]);
        for (n, l) in spec.levels().iter().enumerate().skip(1) {
            let hat = global_connection(&z0, &gc, n).unwrap();
            assert_eq!(hat.shape(), &[l.channels, l.res, l.res, l.res]);
            assert!(hat.data().iter().all(|&v| v == 0.0));
        }
        let bad = LevelSpec::new(vec![(1, 4), (3, 2)]).unwrap();
        assert!(matches!(GlobalConnection::<f32>::init(&bad, 0.02, &mut rng), Err(Error::Spec(_))));
    }

    #[test]
    fn global_connection_gradient_wrt_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = LevelSpec::new(vec![(1, 5), (2, 3), (4, 2)]).unwrap();
        let gc = GlobalConnection::<f64>::init(&spec, 0.02, &mut rng).unwrap();
        let z0 = Tensor::from_vec(&[5, 1, 1, 1], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for n in 1..3 {
            let hat = global_connection(&z0, &gc, n).unwrap();
            let probe = Tensor::from_vec(hat.shape(), (0..hat.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let chain = &gc.chains[n - 1];
            let (_, cache) = chain.forward(&z0.clone().reshape(&[1, 5, 1, 1, 1]).unwrap()).unwrap();
            let gprobe = probe.clone().reshape(&[1, hat.shape()[0], hat.shape()[1], hat.shape()[2], hat.shape()[3]]).unwrap();
            let (gz, _) = chain.backward(&cache, &gprobe).unwrap();
            let r = grad_check(z0.data(), gz.data(), |v| {
                global_connection(&Tensor::from_vec(&[5, 1, 1, 1], v.to_vec()).unwrap(), &gc, n)
                    .unwrap()
                    .dot(&probe)
                    .unwrap()
            });
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    #[test]
    fn dropout_leaves_level_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = LevelSpec::desk();
        let z = random_hierarchy(&spec, &mut rng);
        let (same, _) = dropout_hierarchy(&z, 0.0, &mut rng).unwrap();
        assert_eq!(same, z);
        let (gone, _) = dropout_hierarchy(&z, 1.0, &mut rng).unwrap();
        assert_eq!(gone.grid(0), z.grid(0));
        assert!(gone.grids()[1..].iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let (half, masks) = dropout_hierarchy(&z, 0.5, &mut rng).unwrap();
        assert_eq!(half.grid(0).data(), z.grid(0).data());
        assert!(masks[0].is_none());
        // Survivors keep their exact values.
        for n in 1..spec.len() {
            let keep = masks[n].as_ref().unwrap();
            let cells = keep.len();
            for (i, (&a, &b)) in half.grid(n).data().iter().zip(z.grid(n).data()).enumerate() {
                assert_eq!(a, if keep[i % cells] { b } else { 0.0 });
            }
        }
    }

    #[test]
    fn container_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let z: LatentHierarchy<f32> = random_hierarchy(&LevelSpec::desk(), &mut rng).cast();
            let bytes = serialize(&z);
            let back: LatentHierarchy<f32> = deserialize(&bytes).unwrap();
            assert_eq!(
                back.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                z.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let full = serialize(&zero_hierarchy::<f32>(&LevelSpec::full_scale()));
        assert_eq!(full.len(), 12 + 5 * 8 + 4 * 44032);
        let mut bad = full.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize::<f32>(&bad), Err(Error::Format(_))));
        assert!(matches!(deserialize::<f32>(&full[..full.len() - 3]), Err(Error::Truncated(_))));
    }
}
