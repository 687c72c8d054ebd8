//! Re-distribution of the encoder's final hidden states using history
//! collected from earlier encoder layers.
//!
//! Three variants over the last `L` pre-final layer outputs:
//! - `add`: elementwise sum of the final layer and the `L` layers before it;
//! - `projection`: concatenate the window, project it to model width, then
//!   attend from that history into the final layer;
//! - `attention`: starting from the layer just below the window, iteratively
//!   attend the running history into each window layer, then into the final
//!   layer, so every computed layer is consumed.

use crate::error::{Error, Result};
use crate::ops::Mask;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::attention::multi_head_attention;
use super::params::ParameterSet;

fn check_window(n_layers: usize, agg_layers: usize) -> Result<()> {
    if agg_layers == 0 || agg_layers + 1 > n_layers {
        return Err(Error::Config(format!(
            "aggregation over {agg_layers} layer(s) requires 1 <= L <= N_enc - 1 = {}",
            n_layers.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Elementwise sum of the final layer output and the `agg_layers` outputs
/// preceding it (an unweighted sum, not a mean).
pub fn aggregate_add<T: Scalar>(
    tape: &Tape<T>,
    layer_outputs: &[Tensor<T>],
    agg_layers: usize,
) -> Result<Tensor<T>> {
    check_window(layer_outputs.len(), agg_layers)?;
    let n = layer_outputs.len();
    let mut acc = layer_outputs[n - 1].clone();
    for i in 1..=agg_layers {
        acc = tape.add(&acc, &layer_outputs[n - 1 - i])?;
    }
    Ok(acc)
}

/// Concatenate the selected window along the feature axis, apply the learned
/// affine map down to model width, then attend that history (as queries) into
/// the final layer output (as keys/values).
pub fn aggregate_projection<T: Scalar>(
    tape: &Tape<T>,
    params: &ParameterSet<T>,
    layer_outputs: &[Tensor<T>],
    agg_layers: usize,
    key_mask: Option<&Mask>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    check_window(layer_outputs.len(), agg_layers)?;
    let n = layer_outputs.len();
    let window: Vec<&Tensor<T>> = layer_outputs[n - 1 - agg_layers..n - 1].iter().collect();
    let cat = tape.concat_last(&window)?;
    let history =
        tape.add(&tape.matmul(&cat, params.get("agg.proj.w"))?, params.get("agg.proj.b"))?;
    let last = &layer_outputs[n - 1];
    multi_head_attention(tape, &params.mh("agg.attn"), &history, last, last, key_mask, n_heads)
}

/// Iterated attention over the window: the history starts at the layer just
/// below the window (the embedded input when the window reaches layer 1),
/// attends through each window layer in order, and finally into the last
/// encoder layer.
#[allow(clippy::too_many_arguments)]
pub fn aggregate_attention<T: Scalar>(
    tape: &Tape<T>,
    params: &ParameterSet<T>,
    embedded_input: &Tensor<T>,
    layer_outputs: &[Tensor<T>],
    agg_layers: usize,
    key_mask: Option<&Mask>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    check_window(layer_outputs.len(), agg_layers)?;
    let n = layer_outputs.len();
    let mut history = if n - 1 - agg_layers == 0 {
        embedded_input.clone()
    } else {
        layer_outputs[n - 2 - agg_layers].clone()
    };
    for (block, layer) in (n - agg_layers..n).enumerate() {
        let keys = &layer_outputs[layer - 1];
        history = multi_head_attention(
            tape,
            &params.mh(&format!("agg.attn{block}")),
            &history,
            keys,
            keys,
            key_mask,
            n_heads,
        )?;
    }
    let last = &layer_outputs[n - 1];
    multi_head_attention(
        tape,
        &params.mh(&format!("agg.attn{agg_layers}")),
        &history,
        last,
        last,
        key_mask,
        n_heads,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_sum_to_scaled_copy() {
        let tape = Tape::inference();
        let h = Tensor::<f64>::new(vec![1.0, -2.0, 0.5, 3.0], &[2, 2]);
        let layers = vec![h.clone(), h.clone(), h.clone(), h.clone()];
        let out = aggregate_add(&tape, &layers, 2).unwrap();
        for (o, v) in out.to_vec().iter().zip(h.to_vec()) {
            assert!((o - 3.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn one_layer_sums_exactly_two_tensors() {
        let tape = Tape::inference();
        let a = Tensor::new(vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::new(vec![10.0, 20.0], &[1, 2]);
        let out = aggregate_add(&tape, &[a, b], 1).unwrap();
        assert_eq!(out.to_vec(), vec![11.0, 22.0]);
    }

    #[test]
    fn add_commutes_with_permutation_of_summed_layers() {
        let tape = Tape::inference();
        let mk = |seed: f64| Tensor::from_fn(&[2, 3], |i| ((i as f64 + seed) * 0.7).sin());
        let (a, b, last) = (mk(1.0), mk(2.0), mk(3.0));
        let out1 = aggregate_add(&tape, &[a.clone(), b.clone(), last.clone()], 2).unwrap();
        let out2 = aggregate_add(&tape, &[b, a, last], 2).unwrap();
        for (x, y) in out1.to_vec().iter().zip(out2.to_vec()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn window_bounds_are_config_errors() {
        let tape = Tape::<f64>::inference();
        let h = Tensor::new(vec![0.0, 0.0], &[1, 2]);
        let layers = vec![h.clone(), h];
        assert!(matches!(aggregate_add(&tape, &layers, 0), Err(Error::Config(_))));
        assert!(matches!(aggregate_add(&tape, &layers, 2), Err(Error::Config(_))));
    }
}
