//! Dense tensors, reverse-mode differentiation, SVD and gradient checking.

mod gradcheck;
pub mod kernels;
mod params;
mod svd;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use svd::{svd, Svd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// Population covariance `(1/B)·(Z − mean)ᵀ(Z − mean)` of a `[B, D]` batch,
/// recorded on the tape so it can be differentiated.
pub fn covariance<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var> {
    let (b, d) = tape.value(z).dims2()?;
    if b == 0 {
        return Err(Error::shape("covariance of an empty batch"));
    }
    let mean = tape.mean_axis(z, 0)?;
    let neg = tape.neg(mean)?;
    let centered = tape.add_axis_rows(z, neg)?;
    let gram = tape.matmul(centered, centered, true, false)?;
    debug_assert_eq!(tape.shape(gram), [d, d]);
    tape.scale(gram, T::one() / T::from_usize_lossy(b))
}

impl<T: Real> Tape<T> {
    /// Add the vector `v [D]` to every row of `x [B, D]`.
    pub fn add_axis_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        self.add_axis(x, v, 1)
    }
}

/// Plain-value covariance for callers that do not need gradients.
pub fn covariance_value<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let c = covariance(&mut tape, v)?;
    Ok(tape.value(c).clone())
}
