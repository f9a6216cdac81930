//! Multi-head scaled-dot-product attention built from tape ops, shared by
//! the encoder and the transformer blocks.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// softmax(q kᵀ / sqrt(d_head)) v per head, heads re-concatenated.
///
/// `q` is `[mq, d]`, `k`/`v` are `[mk, d]`, `d` divisible by `heads`.
/// With one head this is exactly the textbook single-matrix attention.
pub fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Head-averaged attention probabilities, `[mq, mk]`; each row sums to 1.
pub fn head_mean_attention_probs<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    heads: usize,
) -> Result<Var> {
    let d = tape.value(q).cols();
    let dh = d / heads;
    let scale = S::of_f64(1.0 / (dh as f64).sqrt());
    let mut acc: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores)?;
        acc = Some(match acc {
            None => probs,
            Some(a) => tape.add(a, probs)?,
        });
    }
    Ok(tape.scale(acc.unwrap(), S::of_f64(1.0 / heads as f64)))
}

/// Rotary-encoding angle tables for the given token positions: `[p, d/2]`
/// cos/sin matrices, frequency pattern tiled per head so rotating the full
/// `[p, d]` row equals rotating each head slice independently.
pub fn rope_tables<S: Scalar>(
    positions: &[usize],
    width: usize,
    heads: usize,
    base: f64,
) -> (Tensor<S>, Tensor<S>) {
    let p = positions.len();
    let half = width / 2;
    let dh = width / heads;
    let pairs_per_head = dh / 2;
    let mut cos = vec![S::zero(); p * half];
    let mut sin = vec![S::zero(); p * half];
    for (i, &pos) in positions.iter().enumerate() {
        for j in 0..half {
            let jh = j % pairs_per_head;
            let freq = base.powf(-2.0 * jh as f64 / dh as f64);
            let angle = pos as f64 * freq;
            cos[i * half + j] = S::of_f64(angle.cos());
            sin[i * half + j] = S::of_f64(angle.sin());
        }
    }
    (
        Tensor::new(vec![p, half], cos).expect("rope table shape"),
        Tensor::new(vec![p, half], sin).expect("rope table shape"),
    )
}
