use rand::Rng;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// Zeroes whole spatial cells (all channels together) of a `[C, r, r, r]`
/// grid with probability `rate`. Survivors are left unscaled, so a dropped
/// cell is indistinguishable from a zero-initialised one.
///
/// Returns the masked grid and the per-cell keep mask.
pub fn dropout_cells<T: Scalar, R: Rng + ?Sized>(
    grid: &Tensor<T>,
    rate: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate {rate} outside [0, 1]")));
    }
    if grid.ndim() != 4 {
        return Err(Error::Dimension(format!(
            "dropout expects [C, r, r, r], got {:?}",
            grid.shape()
        )));
    }
    let channels = grid.shape()[0];
    let cells: usize = grid.shape()[1..].iter().product();
    let keep: Vec<bool> = (0..cells).map(|_| rng.random::<f64>() >= rate).collect();
    let mut out = grid.clone();
    apply_mask(out.data_mut(), channels, &keep);
    Ok((out, keep))
}

/// Zeroes every channel of the cells whose mask entry is `false`.
pub fn apply_mask<T: Scalar>(data: &mut [T], channels: usize, keep: &[bool]) {
    let cells = keep.len();
    for c in 0..channels {
        for (v, &k) in data[c * cells..(c + 1) * cells].iter_mut().zip(keep) {
            if !k {
                *v = T::zero();
            }
        }
    }
}
