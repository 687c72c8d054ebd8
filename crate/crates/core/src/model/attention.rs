//! Scaled dot-product and multi-head attention.

use crate::error::Result;
use crate::ops::Mask;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Projection weights of one multi-head attention block (no biases).
#[derive(Debug, Clone)]
pub struct MhWeights<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

/// softmax(Q K^T / sqrt(d_k)) V with masked key positions excluded.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &Tape<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    let d_k = *q.shape().last().expect("rank >= 2 checked by matmul");
    let scores = tape.matmul(q, &tape.transpose(k)?)?;
    let scaled = tape.scale_add(&scores, T::from_f(1.0 / (d_k as f64).sqrt()), T::zero())?;
    let weights = tape.softmax(&scaled, scaled.rank() - 1, mask)?;
    tape.matmul(&weights, v)
}

/// Project Q/K/V, run scaled dot-product attention per head, concatenate the
/// heads, and apply the output projection.
pub fn multi_head_attention<T: Scalar>(
    tape: &Tape<T>,
    weights: &MhWeights<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&Mask>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    tape.bump("multi_head_attention");
    let qp = tape.matmul(q, &weights.wq)?;
    let kp = tape.matmul(k, &weights.wk)?;
    let vp = tape.matmul(v, &weights.wv)?;
    let d_model = *qp.shape().last().unwrap();
    debug_assert_eq!(d_model % n_heads, 0, "head count must divide d_model");
    let d_head = d_model / n_heads;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_last(&qp, h * d_head, d_head)?;
        let kh = tape.slice_last(&kp, h * d_head, d_head)?;
        let vh = tape.slice_last(&vp, h * d_head, d_head)?;
        heads.push(scaled_dot_attention(tape, &qh, &kh, &vh, mask)?);
    }
    let refs: Vec<&Tensor<T>> = heads.iter().collect();
    let cat = tape.concat_last(&refs)?;
    tape.matmul(&cat, &weights.wo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::new(data, shape)
    }

    #[test]
    fn single_query_single_key_returns_value() {
        let tape = Tape::inference();
        let q = t(vec![0.3, -0.7], &[1, 2]);
        let k = t(vec![1.5, 0.2], &[1, 2]);
        let v = t(vec![4.0, -2.0, 9.0], &[1, 3]);
        let out = scaled_dot_attention(&tape, &q, &k, &v, None).unwrap();
        assert_eq!(out.to_vec(), v.to_vec());
    }

    #[test]
    fn identical_keys_average_the_values() {
        let tape = Tape::inference();
        let q = t(vec![0.9, 0.1], &[1, 2]);
        let k = t(vec![0.5, -0.5, 0.5, -0.5, 0.5, -0.5], &[3, 2]);
        let v = t(vec![3.0, 0.0, 6.0], &[3, 1]);
        let out = scaled_dot_attention(&tape, &q, &k, &v, None).unwrap();
        assert!((out.item() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_case_matches_scalar_oracle() {
        let tape = Tape::inference();
        let q = t(vec![1.0, 0.0], &[1, 2]);
        let k = t(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let v = t(vec![1.0, 0.0], &[2, 1]);
        let out = scaled_dot_attention(&tape, &q, &k, &v, None).unwrap();
        // logits are 1/sqrt(2) and 0
        let e1 = (1.0f64 / 2.0f64.sqrt()).exp();
        let w1 = e1 / (e1 + 1.0);
        assert!((out.item() - w1).abs() < 1e-9, "{} vs {w1}", out.item());
    }

    #[test]
    fn one_head_with_identity_projections_reduces_to_scaled_dot() {
        let tape = Tape::inference();
        let eye = Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        let w = MhWeights { wq: eye.clone(), wk: eye.clone(), wv: eye.clone(), wo: eye.clone() };
        let q = t(vec![0.2, -0.4, 1.0, 0.3], &[2, 2]);
        let k = t(vec![0.7, 0.1, -0.2, 0.5, 0.0, 1.1], &[3, 2]);
        let v = t(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let mh = multi_head_attention(&tape, &w, &q, &k, &v, None, 1).unwrap();
        let sd = scaled_dot_attention(&tape, &q, &k, &v, None).unwrap();
        for (a, b) in mh.to_vec().iter().zip(sd.to_vec()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_keeps_query_length_and_model_width() {
        let tape = Tape::<f32>::inference();
        let mk = |shape: &[usize], seed: f32| {
            Tensor::from_fn(shape, |i| ((i as f32 + seed) * 0.17).sin())
        };
        let w = MhWeights {
            wq: mk(&[4, 4], 1.0),
            wk: mk(&[4, 4], 2.0),
            wv: mk(&[4, 4], 3.0),
            wo: mk(&[4, 4], 4.0),
        };
        for m in [1usize, 3, 7] {
            let q = mk(&[5, 4], 5.0);
            let k = mk(&[m, 4], 6.0);
            let v = mk(&[m, 4], 7.0);
            let out = multi_head_attention(&tape, &w, &q, &k, &v, None, 2).unwrap();
            assert_eq!(out.shape(), &[5, 4]);
        }
    }

    #[test]
    fn multi_head_gradient_matches_finite_differences() {
        use crate::gradcheck::{finite_diff_check, DEFAULT_STEP};
        let x = Tensor::param(
            (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.21).collect(),
            &[3, 4],
        );
        let mk = |seed: f64| Tensor::param((0..16).map(|i| ((i as f64 * 0.37 + seed).sin()) * 0.5).collect(), &[4, 4]);
        let w = MhWeights { wq: mk(0.1), wk: mk(0.4), wv: mk(0.8), wo: mk(1.3) };
        let err = finite_diff_check(
            |tape, x| {
                let y = multi_head_attention(tape, &w, x, x, x, None, 2)?;
                tape.sum(&y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
