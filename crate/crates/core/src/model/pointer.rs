//! Pointer mechanism: generation gate, copy distribution over source
//! positions, and the mixed output distribution over the extended vocabulary.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Per-step generation probability `sigmoid(w h + b)`, shape `[tgt_len]`.
pub fn pointer_gate<T: Scalar>(
    tape: &Tape<T>,
    decoder_states: &Tensor<T>,
    w_gen: &Tensor<T>,
    b_gen: &Tensor<T>,
    pointer_enabled: bool,
) -> Result<Tensor<T>> {
    if !pointer_enabled {
        return Err(Error::Contract(
            "pointer_gate called while the pointer mechanism is disabled".into(),
        ));
    }
    let logits = tape.add(&tape.matmul(decoder_states, w_gen)?, b_gen)?;
    let gate = tape.sigmoid(&logits)?;
    let steps = gate.shape()[0];
    tape.reshape(&gate, &[steps])
}

/// Mix the vocabulary distribution (weighted by `p_gen`) with the copy
/// distribution scattered from source positions onto extended ids (weighted
/// by `1 - p_gen`). The vocabulary part is zero-padded over the OOV slots.
pub fn final_distribution<T: Scalar>(
    tape: &Tape<T>,
    p_vocab: &Tensor<T>,
    copy_weights: &Tensor<T>,
    source_ext_ids: &[usize],
    oov_count: usize,
    p_gen: &Tensor<T>,
) -> Result<Tensor<T>> {
    let width = p_vocab.shape()[1] + oov_count;
    let p_copy = tape.scatter_columns(copy_weights, source_ext_ids, width)?;
    let p_vocab_ext = tape.pad_last(p_vocab, oov_count)?;
    let copy_share = tape.scale_add(p_gen, -T::one(), T::one())?;
    tape.add(
        &tape.row_scale(&p_vocab_ext, p_gen)?,
        &tape.row_scale(&p_copy, &copy_share)?,
    )
}
