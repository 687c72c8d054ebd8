//! Positional encoding, position-wise feed-forward, and the encoder/decoder
//! layers.

use crate::error::Result;
use crate::ops::Mask;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::attention::{multi_head_attention, MhWeights};

/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct FeedForwardWeights<T: Scalar> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct NormWeights<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Fixed sinusoidal position table:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, `PE[pos, 2i+1] = cos(...)`.
/// Not learnable.
pub fn positional_encoding<T: Scalar>(max_len: usize, d_model: usize) -> Tensor<T> {
    assert!(d_model % 2 == 0, "positional encoding requires an even d_model");
    let mut data = vec![T::zero(); max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle =
                pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = T::from_f(angle.sin());
            data[pos * d_model + 2 * i + 1] = T::from_f(angle.cos());
        }
    }
    Tensor::new(data, &[max_len, d_model])
}

/// relu(x w1 + b1) w2 + b2, applied position-wise.
pub fn feed_forward<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &FeedForwardWeights<T>,
) -> Result<Tensor<T>> {
    let inner = tape.relu(&tape.add(&tape.matmul(x, &w.w1)?, &w.b1)?)?;
    tape.add(&tape.matmul(&inner, &w.w2)?, &w.b2)
}

fn norm<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, n: &NormWeights<T>) -> Result<Tensor<T>> {
    tape.layer_norm(x, &n.gain, &n.bias, T::from_f(LN_EPS))
}

/// One encoder layer: self-attention and feed-forward sublayers, each with a
/// residual connection followed by layer normalization.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    self_w: &MhWeights<T>,
    ff_w: &FeedForwardWeights<T>,
    ln1: &NormWeights<T>,
    ln2: &NormWeights<T>,
    key_mask: Option<&Mask>,
    n_heads: usize,
    dropout: f64,
) -> Result<Tensor<T>> {
    let attn = multi_head_attention(tape, self_w, x, x, x, key_mask, n_heads)?;
    let attn = tape.dropout(&attn, dropout)?;
    let h_s = norm(tape, &tape.add(&attn, x)?, ln1)?;
    let ff = feed_forward(tape, &h_s, ff_w)?;
    let ff = tape.dropout(&ff, dropout)?;
    norm(tape, &tape.add(&ff, &h_s)?, ln2)
}

/// One decoder layer: causal self-attention, cross-attention over the encoder
/// memory, then feed-forward; residual + norm around each sublayer.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Scalar>(
    tape: &Tape<T>,
    y: &Tensor<T>,
    memory: &Tensor<T>,
    self_w: &MhWeights<T>,
    cross_w: &MhWeights<T>,
    ff_w: &FeedForwardWeights<T>,
    ln1: &NormWeights<T>,
    ln2: &NormWeights<T>,
    ln3: &NormWeights<T>,
    causal: &Mask,
    memory_mask: Option<&Mask>,
    n_heads: usize,
    dropout: f64,
) -> Result<Tensor<T>> {
    let sa = multi_head_attention(tape, self_w, y, y, y, Some(causal), n_heads)?;
    let sa = tape.dropout(&sa, dropout)?;
    let h_ms = norm(tape, &tape.add(&sa, y)?, ln1)?;
    let ca = multi_head_attention(tape, cross_w, &h_ms, memory, memory, memory_mask, n_heads)?;
    let ca = tape.dropout(&ca, dropout)?;
    let h_d = norm(tape, &tape.add(&ca, &h_ms)?, ln2)?;
    let ff = feed_forward(tape, &h_d, ff_w)?;
    let ff = tape.dropout(&ff, dropout)?;
    norm(tape, &tape.add(&ff, &h_d)?, ln3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_alternates_zero_one() {
        let pe = positional_encoding::<f64>(4, 6);
        let row = &pe.to_vec()[..6];
        assert_eq!(row, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn first_dimension_of_position_one_is_sin_one() {
        let pe = positional_encoding::<f64>(4, 8);
        let v = pe.to_vec()[8];
        assert!((v - 1.0f64.sin()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn entries_stay_in_unit_interval() {
        let pe = positional_encoding::<f64>(50, 16);
        assert!(pe.to_vec().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_weights_leave_only_the_residual_path() {
        // with all attention/FF weights zero and unit norms, the layer output
        // is Norm(Norm(x))
        let tape = Tape::inference();
        let d = 4;
        let zeros = Tensor::zeros(&[d, d]);
        let self_w = MhWeights {
            wq: zeros.clone(),
            wk: zeros.clone(),
            wv: zeros.clone(),
            wo: zeros.clone(),
        };
        let ff_w = FeedForwardWeights {
            w1: Tensor::zeros(&[d, 8]),
            b1: Tensor::zeros(&[8]),
            w2: Tensor::zeros(&[8, d]),
            b2: Tensor::zeros(&[d]),
        };
        let unit = NormWeights { gain: Tensor::full(&[d], 1.0), bias: Tensor::zeros(&[d]) };
        let x = Tensor::new(vec![0.4, -1.0, 2.0, 0.1, 0.9, 0.0, -0.5, 1.5], &[2, d]);
        let out =
            encoder_layer(&tape, &x, &self_w, &ff_w, &unit, &unit, None, 2, 0.0).unwrap();

        let n1 = tape.layer_norm(&x, &unit.gain, &unit.bias, LN_EPS).unwrap();
        let n2 = tape.layer_norm(&n1, &unit.gain, &unit.bias, LN_EPS).unwrap();
        assert_eq!(out.to_vec(), n2.to_vec());
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn masked_pad_position_cannot_influence_other_positions() {
        let tape = Tape::inference();
        let d = 4;
        let mk = |seed: f64, shape: &[usize]| {
            Tensor::from_fn(shape, |i| ((i as f64 + seed) * 0.31).sin() * 0.7)
        };
        let self_w = MhWeights {
            wq: mk(0.0, &[d, d]),
            wk: mk(1.0, &[d, d]),
            wv: mk(2.0, &[d, d]),
            wo: mk(3.0, &[d, d]),
        };
        let ff_w = FeedForwardWeights {
            w1: mk(4.0, &[d, 8]),
            b1: mk(5.0, &[8]),
            w2: mk(6.0, &[8, d]),
            b2: mk(7.0, &[d]),
        };
        let n1 = NormWeights { gain: Tensor::full(&[d], 1.0), bias: Tensor::zeros(&[d]) };
        let mask = Mask::keys(vec![true, true, false]);

        let x = mk(8.0, &[3, d]);
        let mut perturbed = x.to_vec();
        perturbed[2 * d] += 3.0;
        perturbed[2 * d + 1] -= 1.0;
        let x2 = Tensor::new(perturbed, &[3, d]);

        let a = encoder_layer(&tape, &x, &self_w, &ff_w, &n1, &n1, Some(&mask), 2, 0.0).unwrap();
        let b = encoder_layer(&tape, &x2, &self_w, &ff_w, &n1, &n1, Some(&mask), 2, 0.0).unwrap();
        for row in 0..2 {
            for j in 0..d {
                let (av, bv) = (a.to_vec()[row * d + j], b.to_vec()[row * d + j]);
                assert!((av - bv).abs() <= 1e-6, "row {row} changed: {av} vs {bv}");
            }
        }
    }

    #[test]
    fn layer_norm_helper_matches_shape() {
        let tape = Tape::<f32>::inference();
        let x = Tensor::from_fn(&[5, 6], |i| i as f32 * 0.1);
        let n = NormWeights { gain: Tensor::full(&[6], 1.0), bias: Tensor::zeros(&[6]) };
        let y = norm(&tape, &x, &n).unwrap();
        assert_eq!(y.shape(), &[5, 6]);
    }
}
