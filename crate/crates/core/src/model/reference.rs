//! Straight-line plain Transformer forward pass, kept as an equivalence
//! check: with aggregation and pointer disabled, the main model path must be
//! bit-identical to this one.
//!
//! The wiring below is written out longhand on purpose; it shares only the
//! primitive tensor operations with the main path.

use crate::error::{Error, Result};
use crate::ops::Mask;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tokenizer::{EncodedPair, PAD};

use super::layers::LN_EPS;
use super::{AggMethod, Model};

fn attention_block<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    prefix: &str,
    q: &Tensor<T>,
    kv: &Tensor<T>,
    mask: Option<&Mask>,
) -> Result<Tensor<T>> {
    let p = &model.params;
    let qp = tape.matmul(q, p.get(&format!("{prefix}.wq")))?;
    let kp = tape.matmul(kv, p.get(&format!("{prefix}.wk")))?;
    let vp = tape.matmul(kv, p.get(&format!("{prefix}.wv")))?;
    let heads = model.config.n_heads;
    let d_head = model.config.d_model / heads;
    let scale = T::from_f(1.0 / (d_head as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_last(&qp, h * d_head, d_head)?;
        let kh = tape.slice_last(&kp, h * d_head, d_head)?;
        let vh = tape.slice_last(&vp, h * d_head, d_head)?;
        let scores = tape.scale_add(&tape.matmul(&qh, &tape.transpose(&kh)?)?, scale, T::zero())?;
        let weights = tape.softmax(&scores, scores.rank() - 1, mask)?;
        outs.push(tape.matmul(&weights, &vh)?);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    tape.matmul(&tape.concat_last(&refs)?, p.get(&format!("{prefix}.wo")))
}

fn sublayer_norm<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let p = &model.params;
    tape.layer_norm(
        x,
        p.get(&format!("{prefix}.g")),
        p.get(&format!("{prefix}.b")),
        T::from_f(LN_EPS),
    )
}

fn pff<T: Scalar>(
    tape: &Tape<T>,
    model: &Model<T>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let p = &model.params;
    let inner = tape.relu(&tape.add(
        &tape.matmul(x, p.get(&format!("{prefix}.w1")))?,
        p.get(&format!("{prefix}.b1")),
    )?)?;
    tape.add(&tape.matmul(&inner, p.get(&format!("{prefix}.w2")))?, p.get(&format!("{prefix}.b2")))
}

fn embed<T: Scalar>(tape: &Tape<T>, model: &Model<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let emb = tape.embedding(model.params.get("embed.tok"), ids)?;
    let pe = tape.slice_axis0(model.position_table(), 0, ids.len())?;
    tape.add(&emb, &pe)
}

/// Evaluation-mode log distributions of a plain Transformer (no aggregation,
/// no pointer) over a teacher-forced pair.
pub fn plain_forward_logprobs<T: Scalar>(
    model: &Model<T>,
    pair: &EncodedPair,
) -> Result<Tensor<T>> {
    if model.config.agg_method != AggMethod::None || model.config.use_pointer {
        return Err(Error::Contract(
            "reference path requires agg_method=none and pointer disabled".into(),
        ));
    }
    let tape = Tape::inference();
    let src_mask = if pair.source_ids.iter().any(|&id| id == PAD) {
        Some(Mask::keys(pair.source_ids.iter().map(|&id| id != PAD).collect()))
    } else {
        None
    };

    let mut x = embed(&tape, model, &pair.source_ids)?;
    for l in 0..model.config.n_enc {
        let attn = attention_block(&tape, model, &format!("enc.{l}.self"), &x, &x, src_mask.as_ref())?;
        let h_s = sublayer_norm(&tape, model, &format!("enc.{l}.ln1"), &tape.add(&attn, &x)?)?;
        let ff = pff(&tape, model, &format!("enc.{l}.ff"), &h_s)?;
        x = sublayer_norm(&tape, model, &format!("enc.{l}.ln2"), &tape.add(&ff, &h_s)?)?;
    }
    let memory = x;

    let decoder_in = &pair.target_ids[..pair.target_ids.len() - 1];
    let causal = Mask::causal(decoder_in.len());
    let cross_mask = Mask::keys(pair.source_ids.iter().map(|&id| id != PAD).collect());
    let mut y = embed(&tape, model, decoder_in)?;
    for l in 0..model.config.n_dec {
        let sa = attention_block(&tape, model, &format!("dec.{l}.self"), &y, &y, Some(&causal))?;
        let h_ms = sublayer_norm(&tape, model, &format!("dec.{l}.ln1"), &tape.add(&sa, &y)?)?;
        let ca = attention_block(
            &tape,
            model,
            &format!("dec.{l}.cross"),
            &h_ms,
            &memory,
            Some(&cross_mask),
        )?;
        let h_d = sublayer_norm(&tape, model, &format!("dec.{l}.ln2"), &tape.add(&ca, &h_ms)?)?;
        let ff = pff(&tape, model, &format!("dec.{l}.ff"), &h_d)?;
        y = sublayer_norm(&tape, model, &format!("dec.{l}.ln3"), &tape.add(&ff, &h_d)?)?;
    }

    let logits = tape.add(&tape.matmul(&y, model.params.get("out.w"))?, model.params.get("out.b"))?;
    let p_vocab = tape.softmax(&logits, 1, None)?;
    tape.safe_log(&p_vocab)
}
