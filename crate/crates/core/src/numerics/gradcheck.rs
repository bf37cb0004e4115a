//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_err: f64,
    /// Flat indices of entries whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures.is_empty())
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare tape gradients of the scalar built by `f` against the
/// fourth-order central difference
/// `(8·(f(p + h) − f(p − h)) − (f(p + 2h) − f(p − 2h))) / 12h`, entry by entry.
///
/// The wider stencil keeps truncation error at `O(h⁴)`, so `h` can be large
/// enough that round-off stays far below the tolerance even for entries
/// whose gradient is close to zero.
///
/// `f` receives one leaf per entry of `params`, in order. It is evaluated
/// twice at the base point first; any disagreement is reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(p.clone(), i))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, p) in params.iter().enumerate() {
        let analytic = grads
            .param(index)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        let mut check = ParamCheck {
            index,
            max_rel_err: 0.0,
            failures: Vec::new(),
        };
        for e in 0..p.numel() {
            let base = p.data()[e];
            let mut at = |k: f64| {
                work[index].data_mut()[e] = base + k * step;
                evaluate(&f, &work)
            };
            let (up, down, up2, down2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work[index].data_mut()[e] = base;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * step);
            let err = relative_error(analytic.data()[e], numeric);
            check.max_rel_err = check.max_rel_err.max(err);
            if err > tol {
                check.failures.push(e);
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport { tol, params: checks })
}
