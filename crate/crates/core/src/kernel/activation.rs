use super::{Scalar, Tensor};

/// Default negative slope for the decoders and convolution stacks.
pub const LEAKY_SLOPE: f64 = 0.02;

pub fn leaky_relu_fwd<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { alpha * v })
}

/// Gradient through the activation, given the forward *input* `x`.
pub fn leaky_relu_bwd<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, alpha: T) -> Tensor<T> {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv < T::zero() {
            *gv *= alpha;
        }
    }
    g
}

/// In-place variant used by the network's hot loops.
pub(crate) fn leaky_relu_inplace<T: Scalar>(v: &mut [T], alpha: T) {
    for x in v {
        if *x < T::zero() {
            *x *= alpha;
        }
    }
}

/// Multiplies `grad` by the activation slope at each pre-activation value.
pub(crate) fn leaky_relu_grad_inplace<T: Scalar>(pre: &[T], grad: &mut [T], alpha: T) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p < T::zero() {
            *g *= alpha;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positive_and_negative_inputs() {
        let x = Tensor::from_vec(&[2], vec![2.0f64, -1.0]).unwrap();
        let y = leaky_relu_fwd(&x, 0.02);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.02).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Stay away from the kink at zero.
        let vals: Vec<f64> = (0..50)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let probe: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[50], vals).unwrap();
        let p = Tensor::from_vec(&[50], probe).unwrap();
        let g = leaky_relu_bwd(&x, &p, 0.02);
        let r = grad_check(x.data(), g.data(), |v| {
            leaky_relu_fwd(&Tensor::from_vec(&[50], v.to_vec()).unwrap(), 0.02).dot(&p).unwrap()
        });
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}
