//! 3D convolution and transposed convolution on `[B, C, D, H, W]` tensors.
//!
//! Convolution kernels are laid out `[Cout, Cin, kd, kh, kw]`; transposed
//! convolution kernels `[Cin, Cout, kd, kh, kw]`, so that `tconv3d_fwd` with
//! the same kernel is the adjoint of `conv3d_fwd`.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Stride and padding shared by both convolution flavours.
///
/// `output_padding` only affects transposed convolutions, where it extends
/// the output on the high side so that it can match a convolution's input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub const fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv_out_dim(input: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    if spec.stride == 0 {
        return Err(Error::Dimension("stride must be positive".into()));
    }
    let padded = input + 2 * spec.padding;
    if padded < k {
        return Err(Error::Dimension(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / spec.stride + 1)
}

pub fn tconv_out_dim(input: usize, k: usize, spec: ConvSpec) -> Result<usize> {
    if spec.stride == 0 || input == 0 {
        return Err(Error::Dimension("stride and input must be positive".into()));
    }
    let full = (input - 1) * spec.stride + k + spec.output_padding;
    if full <= 2 * spec.padding {
        return Err(Error::Dimension(format!(
            "transposed convolution output would be empty (input {input}, kernel {k})"
        )));
    }
    Ok(full - 2 * spec.padding)
}

fn dims5(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 5]> {
    match *t.shape() {
        [a, b, c, d, e] => Ok([a, b, c, d, e]),
        _ => Err(Error::Dimension(format!(
            "{what} must be 5-D, got {:?}",
            t.shape()
        ))),
    }
}

/// Calls `f(small, big, tap)` for every spatial position pair related by
/// `big = small * stride + tap - padding` on each axis.
fn for_each_tap(
    small: [usize; 3],
    big: [usize; 3],
    kernel: [usize; 3],
    spec: ConvSpec,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for sd in 0..small[0] {
        for kd in 0..kernel[0] {
            let bd = sd as isize * s + kd as isize - p;
            if bd < 0 || bd >= big[0] as isize {
                continue;
            }
            for sh in 0..small[1] {
                for kh in 0..kernel[1] {
                    let bh = sh as isize * s + kh as isize - p;
                    if bh < 0 || bh >= big[1] as isize {
                        continue;
                    }
                    for sw in 0..small[2] {
                        for kw in 0..kernel[2] {
                            let bw = sw as isize * s + kw as isize - p;
                            if bw < 0 || bw >= big[2] as isize {
                                continue;
                            }
                            let si = (sd * small[1] + sh) * small[2] + sw;
                            let bi = ((bd as usize) * big[1] + bh as usize) * big[2] + bw as usize;
                            let ki = (kd * kernel[1] + kh) * kernel[2] + kw;
                            f(si, bi, ki);
                        }
                    }
                }
            }
        }
    }
}

struct Layout {
    batch: usize,
    small_c: usize,
    big_c: usize,
    small: [usize; 3],
    big: [usize; 3],
    kernel: [usize; 3],
}

impl Layout {
    fn small_len(&self) -> usize {
        self.small.iter().product()
    }
    fn big_len(&self) -> usize {
        self.big.iter().product()
    }
    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

fn conv_layout<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Layout> {
    let [b, cin, d, h, w] = dims5(x, "conv3d input")?;
    let [cout, kcin, kd, kh, kw] = dims5(k, "conv3d kernel")?;
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "conv3d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    let out = [
        conv_out_dim(d, kd, spec)?,
        conv_out_dim(h, kh, spec)?,
        conv_out_dim(w, kw, spec)?,
    ];
    Ok(Layout {
        batch: b,
        small_c: cout,
        big_c: cin,
        small: out,
        big: [d, h, w],
        kernel: [kd, kh, kw],
    })
}

fn tconv_layout<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, spec: ConvSpec) -> Result<Layout> {
    let [b, cin, d, h, w] = dims5(x, "tconv3d input")?;
    let [kcin, cout, kd, kh, kw] = dims5(k, "tconv3d kernel")?;
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "tconv3d kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    let out = [
        tconv_out_dim(d, kd, spec)?,
        tconv_out_dim(h, kh, spec)?,
        tconv_out_dim(w, kw, spec)?,
    ];
    Ok(Layout {
        batch: b,
        small_c: cin,
        big_c: cout,
        small: [d, h, w],
        big: out,
        kernel: [kd, kh, kw],
    })
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &Tensor<T>, batch: usize, channels: usize) -> Result<()> {
    bias.expect_shape(&[channels])?;
    let plane = y.len() / (batch * channels).max(1);
    for (i, chunk) in y.data_mut().chunks_exact_mut(plane.max(1)).enumerate() {
        let b = bias.data()[i % channels];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

fn bias_grad<T: Scalar>(g: &Tensor<T>, batch: usize, channels: usize) -> Tensor<T> {
    let mut gb = Tensor::zeros(&[channels]);
    let plane = g.len() / (batch * channels).max(1);
    for (i, chunk) in g.data().chunks_exact(plane.max(1)).enumerate() {
        gb.data_mut()[i % channels] += chunk.iter().copied().sum();
    }
    gb
}

const NO_TAP: usize = usize::MAX;

/// Big-side spatial index for every `(tap, small position)` pair, row-major
/// `[K, S]`, with [`NO_TAP`] where the tap falls into padding.
fn tap_table(l: &Layout, spec: ConvSpec) -> Vec<usize> {
    let sl = l.small_len();
    let mut table = vec![NO_TAP; l.k_len() * sl];
    for_each_tap(l.small, l.big, l.kernel, spec, |si, bi, ki| table[ki * sl + si] = bi);
    table
}

/// Gathers a `[C, big]` volume into columns `[C * K, S]`.
fn im2col<T: Scalar>(big: &[T], channels: usize, table: &[usize]) -> Vec<T> {
    let mut cols = Vec::with_capacity(channels * table.len());
    for c in 0..channels {
        let plane = &big[c * (big.len() / channels)..(c + 1) * (big.len() / channels)];
        cols.extend(table.iter().map(|&i| if i == NO_TAP { T::zero() } else { plane[i] }));
    }
    cols
}

/// Scatter-adds columns `[C * K, S]` back into a `[C, big]` volume.
fn col2im<T: Scalar>(cols: &[T], channels: usize, table: &[usize], big: &mut [T]) {
    let bl = big.len() / channels;
    for c in 0..channels {
        let plane = &mut big[c * bl..(c + 1) * bl];
        for (&i, &v) in table.iter().zip(&cols[c * table.len()..(c + 1) * table.len()]) {
            if i != NO_TAP {
                plane[i] += v;
            }
        }
    }
}

/// Cross-correlation of `x` with `kernel` plus per-channel `bias`.
pub fn conv3d_fwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let l = conv_layout(x, kernel, spec)?;
    let (sl, bl, kl) = (l.small_len(), l.big_len(), l.k_len());
    let table = tap_table(&l, spec);
    let rows = l.big_c * kl;
    let mut y = Tensor::zeros(&[l.batch, l.small_c, l.small[0], l.small[1], l.small[2]]);
    for b in 0..l.batch {
        let cols = im2col(&x.data()[b * l.big_c * bl..(b + 1) * l.big_c * bl], l.big_c, &table);
        let yb = &mut y.data_mut()[b * l.small_c * sl..(b + 1) * l.small_c * sl];
        T::gemm(l.small_c, rows, sl, T::one(), kernel.data(), rows as isize, 1, &cols, sl as isize, 1, T::zero(), yb, sl as isize, 1);
    }
    add_bias(&mut y, bias, l.batch, l.small_c)?;
    Ok(y)
}

pub fn conv3d_bwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let l = conv_layout(x, kernel, spec)?;
    grad_out.expect_shape(&[l.batch, l.small_c, l.small[0], l.small[1], l.small[2]])?;
    let (sl, bl, kl) = (l.small_len(), l.big_len(), l.k_len());
    let table = tap_table(&l, spec);
    let rows = l.big_c * kl;
    let mut gx = Tensor::zeros_like(x);
    let mut gk = Tensor::zeros_like(kernel);
    let mut gcols = vec![T::zero(); rows * sl];
    for b in 0..l.batch {
        let xb = &x.data()[b * l.big_c * bl..(b + 1) * l.big_c * bl];
        let gb = &grad_out.data()[b * l.small_c * sl..(b + 1) * l.small_c * sl];
        let cols = im2col(xb, l.big_c, &table);
        T::gemm(l.small_c, sl, rows, T::one(), gb, sl as isize, 1, &cols, 1, sl as isize, T::one(), gk.data_mut(), rows as isize, 1);
        T::gemm(rows, l.small_c, sl, T::one(), kernel.data(), 1, rows as isize, gb, sl as isize, 1, T::zero(), &mut gcols, sl as isize, 1);
        col2im(&gcols, l.big_c, &table, &mut gx.data_mut()[b * l.big_c * bl..(b + 1) * l.big_c * bl]);
    }
    Ok(ConvGrads {
        x: gx,
        weight: gk,
        bias: bias_grad(grad_out, l.batch, l.small_c),
    })
}

/// Transposed convolution (the adjoint of [`conv3d_fwd`]) plus `bias`.
pub fn tconv3d_fwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let l = tconv_layout(x, kernel, spec)?;
    let (sl, bl, kl) = (l.small_len(), l.big_len(), l.k_len());
    let table = tap_table(&l, spec);
    let rows = l.big_c * kl;
    let mut y = Tensor::zeros(&[l.batch, l.big_c, l.big[0], l.big[1], l.big[2]]);
    let mut cols = vec![T::zero(); rows * sl];
    for b in 0..l.batch {
        let xb = &x.data()[b * l.small_c * sl..(b + 1) * l.small_c * sl];
        T::gemm(rows, l.small_c, sl, T::one(), kernel.data(), 1, rows as isize, xb, sl as isize, 1, T::zero(), &mut cols, sl as isize, 1);
        col2im(&cols, l.big_c, &table, &mut y.data_mut()[b * l.big_c * bl..(b + 1) * l.big_c * bl]);
    }
    add_bias(&mut y, bias, l.batch, l.big_c)?;
    Ok(y)
}

pub fn tconv3d_bwd<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvGrads<T>> {
    let l = tconv_layout(x, kernel, spec)?;
    grad_out.expect_shape(&[l.batch, l.big_c, l.big[0], l.big[1], l.big[2]])?;
    let (sl, bl, kl) = (l.small_len(), l.big_len(), l.k_len());
    let table = tap_table(&l, spec);
    let rows = l.big_c * kl;
    let mut gx = Tensor::zeros_like(x);
    let mut gk = Tensor::zeros_like(kernel);
    for b in 0..l.batch {
        let xb = &x.data()[b * l.small_c * sl..(b + 1) * l.small_c * sl];
        let gb = &grad_out.data()[b * l.big_c * bl..(b + 1) * l.big_c * bl];
        let gcols = im2col(gb, l.big_c, &table);
        T::gemm(l.small_c, rows, sl, T::one(), kernel.data(), rows as isize, 1, &gcols, sl as isize, 1, T::zero(), &mut gx.data_mut()[b * l.small_c * sl..(b + 1) * l.small_c * sl], sl as isize, 1);
        T::gemm(l.small_c, sl, rows, T::one(), xb, sl as isize, 1, &gcols, 1, sl as isize, T::one(), gk.data_mut(), rows as isize, 1);
    }
    Ok(ConvGrads {
        x: gx,
        weight: gk,
        bias: bias_grad(grad_out, l.batch, l.big_c),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{grad_check_with, GradCheckOptions};

    // The probed functional is linear in each argument, so a wide step has no
    // truncation error and keeps rounding noise small.
    fn grad_check(x: &[f64], g: &[f64], f: impl FnMut(&[f64]) -> f64) -> crate::kernel::GradCheckReport {
        grad_check_with(x, g, GradCheckOptions { step: 1e-2, ..Default::default() }, f)
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 1, 3, 4, 2], &mut rng);
        let k = Tensor::full(&[1, 1, 1, 1, 1], 1.0);
        let y = conv3d_fwd(&x, &k, &Tensor::zeros(&[1]), ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = conv3d_fwd(&x, &k, &Tensor::zeros(&[1]), ConvSpec::new(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn tconv_spreads_single_voxel() {
        let x = Tensor::<f64>::full(&[1, 1, 1, 1, 1], 2.5);
        let k = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let y = tconv3d_fwd(&x, &k, &Tensor::zeros(&[1]), ConvSpec::new(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn empty_output_is_dimension_error() {
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(
            conv3d_fwd(&x, &k, &Tensor::zeros(&[1]), ConvSpec::new(1, 0)),
            Err(Error::Dimension(_))
        ));
    }

    // (x shape, kernel size, spec) for the configurations the model uses plus odd ones.
    fn configs() -> Vec<([usize; 5], usize, usize, ConvSpec)> {
        vec![
            ([2, 2, 8, 8, 8], 3, 3, ConvSpec::new(2, 1).with_output_padding(1)),
            ([1, 3, 4, 4, 4], 2, 2, ConvSpec::new(2, 0)),
            ([1, 2, 5, 4, 3], 3, 2, ConvSpec::new(1, 1)),
            ([2, 3, 1, 1, 1], 1, 2, ConvSpec::new(1, 0)),
        ]
    }

    #[test]
    fn tconv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (xs, k, cout, spec) in configs() {
            let x = random(&xs, &mut rng);
            let kern = random(&[cout, xs[1], k, k, k], &mut rng);
            let zero_out = Tensor::zeros(&[cout]);
            let y_shape = conv3d_fwd(&x, &kern, &zero_out, spec).unwrap().shape().to_vec();
            let y = random(&y_shape, &mut rng);
            let lhs = conv3d_fwd(&x, &kern, &zero_out, spec).unwrap().dot(&y).unwrap();
            let back = tconv3d_fwd(&y, &kern, &Tensor::zeros(&[xs[1]]), spec).unwrap();
            assert_eq!(back.shape(), x.shape(), "{spec:?}");
            let rhs = x.dot(&back).unwrap();
            assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (xs, k, cout, spec) in configs() {
            let x = random(&xs, &mut rng);
            let kern = random(&[cout, xs[1], k, k, k], &mut rng);
            let bias = random(&[cout], &mut rng);
            let y0 = conv3d_fwd(&x, &kern, &bias, spec).unwrap();
            let probe = random(y0.shape(), &mut rng);
            let g = conv3d_bwd(&x, &kern, &probe, spec).unwrap();
            let f = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| conv3d_fwd(x, k, b, spec).unwrap().dot(&probe).unwrap();
            let rs = [
                grad_check(x.data(), g.x.data(), |v| f(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &kern, &bias)),
                grad_check(kern.data(), g.weight.data(), |v| f(&x, &Tensor::from_vec(kern.shape(), v.to_vec()).unwrap(), &bias)),
                grad_check(bias.data(), g.bias.data(), |v| f(&x, &kern, &Tensor::from_vec(bias.shape(), v.to_vec()).unwrap())),
            ];
            for r in rs {
                assert!(r.max_rel_err < 1e-6, "{spec:?}: {r:?}");
            }
        }
    }

    #[test]
    fn tconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (xs, k, cout, spec) in configs() {
            let x = random(&xs, &mut rng);
            let kern = random(&[xs[1], cout, k, k, k], &mut rng);
            let bias = random(&[cout], &mut rng);
            let y0 = tconv3d_fwd(&x, &kern, &bias, spec).unwrap();
            let probe = random(y0.shape(), &mut rng);
            let g = tconv3d_bwd(&x, &kern, &probe, spec).unwrap();
            let f = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| tconv3d_fwd(x, k, b, spec).unwrap().dot(&probe).unwrap();
            let rs = [
                grad_check(x.data(), g.x.data(), |v| f(&Tensor::from_vec(x.shape(), v.to_vec()).unwrap(), &kern, &bias)),
                grad_check(kern.data(), g.weight.data(), |v| f(&x, &Tensor::from_vec(kern.shape(), v.to_vec()).unwrap(), &bias)),
                grad_check(bias.data(), g.bias.data(), |v| f(&x, &kern, &Tensor::from_vec(bias.shape(), v.to_vec()).unwrap())),
            ];
            for r in rs {
                assert!(r.max_rel_err < 1e-6, "{spec:?}: {r:?}");
            }
        }
    }
}
