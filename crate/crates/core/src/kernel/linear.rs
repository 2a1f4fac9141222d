//! Fully-connected layer: `y = x Wᵀ + b`.

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Gradients returned by [`linear_bwd`].
#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "linear expects x[B,in] and W[out,in], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (batch, fan_in) = (x.shape()[0], x.shape()[1]);
    let (fan_out, w_in) = (w.shape()[0], w.shape()[1]);
    if fan_in != w_in {
        return Err(Error::Dimension(format!(
            "linear inner dimensions disagree: x has {fan_in}, W has {w_in}"
        )));
    }
    Ok((batch, fan_in, fan_out))
}

pub fn linear_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, fan_in, fan_out) = check(x, w)?;
    b.expect_shape(&[fan_out])?;
    let mut y = Tensor::zeros(&[batch, fan_out]);
    for row in y.data_mut().chunks_exact_mut(fan_out.max(1)) {
        row.copy_from_slice(b.data());
    }
    // y[B,out] += x[B,in] * W^T[in,out]
    T::gemm(
        batch,
        fan_in,
        fan_out,
        T::one(),
        x.data(),
        fan_in as isize,
        1,
        w.data(),
        1,
        fan_in as isize,
        T::one(),
        y.data_mut(),
        fan_out as isize,
        1,
    );
    Ok(y)
}

pub fn linear_bwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, fan_in, fan_out) = check(x, w)?;
    grad_out.expect_shape(&[batch, fan_out])?;
    let mut gx = Tensor::zeros(&[batch, fan_in]);
    let mut gw = Tensor::zeros(&[fan_out, fan_in]);
    let mut gb = Tensor::zeros(&[fan_out]);
    // gx[B,in] = g[B,out] * W[out,in]
    T::gemm(
        batch,
        fan_out,
        fan_in,
        T::one(),
        grad_out.data(),
        fan_out as isize,
        1,
        w.data(),
        fan_in as isize,
        1,
        T::zero(),
        gx.data_mut(),
        fan_in as isize,
        1,
    );
    // gW[out,in] = g^T[out,B] * x[B,in]
    T::gemm(
        fan_out,
        batch,
        fan_in,
        T::one(),
        grad_out.data(),
        1,
        fan_out as isize,
        x.data(),
        fan_in as isize,
        1,
        T::zero(),
        gw.data_mut(),
        fan_in as isize,
        1,
    );
    for row in grad_out.data().chunks_exact(fan_out.max(1)) {
        for (acc, &g) in gb.data_mut().iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(LinearGrads {
        x: gx,
        weight: gw,
        bias: gb,
    })
}
