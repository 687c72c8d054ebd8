//! Central finite-difference verification of reverse-mode gradients.
//!
//! Runs at `f64` only: at `f32` the difference quotient loses too many digits
//! to be a usable oracle. The relative error uses the denominator
//! `max(|analytic|, |numeric|, 1e-8)` so that near-zero gradients compare
//! sanely.

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(t: &Tensor<f64>) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "finite-difference check needs a scalar loss, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences, returning the worst relative error over all elements.
///
/// `f` must be pure: it is re-evaluated many times at perturbed copies of
/// `x`'s buffer.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    if !x.requires_grad() {
        return Err(Error::Contract("finite_diff_check input must require gradients".into()));
    }
    x.zero_grad();
    let tape = Tape::recording();
    let loss = f(&tape, x)?;
    scalar_value(&loss)?;
    tape.backward(&loss)?;
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    let base = x.to_vec();
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        x.set_data(probe.clone());
        let plus = scalar_value(&f(&Tape::inference(), x)?)?;
        probe[i] = base[i] - h;
        x.set_data(probe);
        let minus = scalar_value(&f(&Tape::inference(), x)?)?;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    x.set_data(base);
    Ok(worst)
}

/// Finite-difference check of a loss against every tensor in `tensors`.
///
/// The loss closure reads the tensors through shared handles, so perturbing a
/// buffer in place re-parameterizes the next evaluation. Returns the worst
/// relative error per named tensor.
pub fn finite_diff_check_many<F>(
    f: F,
    tensors: &[(String, Tensor<f64>)],
    h: f64,
) -> Result<Vec<(String, f64)>>
where
    F: Fn(&Tape<f64>) -> Result<Tensor<f64>>,
{
    for (_, t) in tensors {
        t.zero_grad();
    }
    let tape = Tape::recording();
    let loss = f(&tape)?;
    scalar_value(&loss)?;
    tape.backward(&loss)?;

    let mut report = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let base = t.to_vec();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe[i] = base[i] + h;
            t.set_data(probe.clone());
            let plus = scalar_value(&f(&Tape::inference())?)?;
            probe[i] = base[i] - h;
            t.set_data(probe);
            let minus = scalar_value(&f(&Tape::inference())?)?;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        t.set_data(base);
        report.push((name.clone(), worst));
    }
    Ok(report)
}
