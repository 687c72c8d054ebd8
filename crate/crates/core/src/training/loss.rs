//! Negative log-likelihood over teacher-forced target sequences.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

fn picked_log_probs<T: Scalar>(
    tape: &Tape<T>,
    log_probs: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(Tensor<T>, usize)> {
    if log_probs.rank() != 2 || targets.len() != log_probs.shape()[0] || mask.len() != targets.len()
    {
        return Err(Error::Shape(format!(
            "nll_loss expects log_probs [t, w] with t targets and t mask flags, got {:?}, {} targets, {} flags",
            log_probs.shape(),
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("nll_loss: every target step is masked".into()));
    }
    let picked = tape.pick_per_row(log_probs, targets)?;
    let factors = Tensor::new(
        mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
        &[mask.len()],
    );
    let masked = tape.mul(&picked, &factors)?;
    Ok((masked, count))
}

/// Sum over unmasked steps of `-log p(y_t | y_<t, X)`.
pub fn nll_loss_sum<T: Scalar>(
    tape: &Tape<T>,
    log_probs: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(Tensor<T>, usize)> {
    let (masked, count) = picked_log_probs(tape, log_probs, targets, mask)?;
    let total = tape.sum(&masked)?;
    Ok((tape.scale_add(&total, -T::one(), T::zero())?, count))
}

/// Mean over unmasked steps of `-log p(y_t | y_<t, X)`.
pub fn nll_loss<T: Scalar>(
    tape: &Tape<T>,
    log_probs: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor<T>> {
    let (masked, count) = picked_log_probs(tape, log_probs, targets, mask)?;
    let total = tape.sum(&masked)?;
    tape.scale_add(&total, -T::one() / T::from_f(count as f64), T::zero())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certain_predictions_have_zero_loss() {
        let tape = Tape::inference();
        // probability 1 on the target at every step
        let logp = Tensor::new(vec![0.0, -30.0, -30.0, 0.0], &[2, 2]);
        let loss = nll_loss(&tape, &logp, &[0, 1], &[true, true]).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn uniform_distribution_costs_log_vocab_per_token() {
        let tape = Tape::inference();
        let v = 7usize;
        let lp = (1.0 / v as f64).ln();
        let logp = Tensor::new(vec![lp; 3 * v], &[3, v]);
        let loss = nll_loss(&tape, &logp, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((loss.item() - (v as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_oracle_on_three_steps() {
        let tape = Tape::inference();
        let probs: [[f64; 3]; 3] =
            [[0.7, 0.2, 0.1], [0.05, 0.9, 0.05], [0.3, 0.3, 0.4]];
        let logp: Vec<f64> = probs.iter().flatten().map(|p| p.ln()).collect();
        let t = Tensor::new(logp, &[3, 3]);
        let targets = [0usize, 1, 2];
        let loss = nll_loss(&tape, &t, &targets, &[true, true, true]).unwrap();
        let oracle = -(probs[0][0].ln() + probs[1][1].ln() + probs[2][2].ln()) / 3.0;
        assert!((loss.item() - oracle).abs() < 1e-9);

        let (sum, n) = nll_loss_sum(&tape, &t, &targets, &[true, true, true]).unwrap();
        assert_eq!(n, 3);
        assert!((sum.item() - oracle * 3.0).abs() < 1e-9);
    }

    #[test]
    fn masked_steps_are_excluded() {
        let tape = Tape::inference();
        let logp = Tensor::new(vec![(0.5f64).ln(), -9.0, -1.0, (0.25f64).ln()], &[2, 2]);
        let loss = nll_loss(&tape, &logp, &[0, 1], &[true, false]).unwrap();
        assert!((loss.item() + (0.5f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_a_contract_error() {
        let tape = Tape::<f64>::inference();
        let logp = Tensor::new(vec![0.0, 0.0], &[1, 2]);
        assert!(matches!(
            nll_loss(&tape, &logp, &[0], &[false]),
            Err(Error::Contract(_))
        ));
    }
}
