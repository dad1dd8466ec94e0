//! Transformer encoder building blocks: multi-head self-attention,
//! post-layernorm encoder layers, and the summed token/position/segment
//! embedding. Used both by the frozen language backbone and by the small
//! trainable modality encoders.

use rand_chacha::ChaCha8Rng;

use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, TensorError};

/// Feedforward activation of an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

/// Dropout dial threaded through forward passes.
#[derive(Debug, Clone, Copy)]
pub struct DropoutCfg {
    pub p: f64,
    pub training: bool,
}

impl DropoutCfg {
    pub fn inference() -> Self {
        Self {
            p: 0.0,
            training: false,
        }
    }

    pub fn training(p: f64) -> Self {
        Self { p, training: true }
    }
}

/// Tape handles for one attention block's projections.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub heads: usize,
}

/// Tape handles for one full encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerNodes {
    pub attn: AttentionNodes,
    pub attn_ln_gain: NodeId,
    pub attn_ln_bias: NodeId,
    pub ffn_in_w: NodeId,
    pub ffn_in_b: NodeId,
    pub ffn_out_w: NodeId,
    pub ffn_out_b: NodeId,
    pub ffn_ln_gain: NodeId,
    pub ffn_ln_bias: NodeId,
    pub activation: Activation,
}

/// Tape handles for the embedding tables.
#[derive(Debug, Clone)]
pub struct EmbeddingNodes {
    pub token: NodeId,
    pub position: NodeId,
    pub segment: NodeId,
    pub ln_gain: NodeId,
    pub ln_bias: NodeId,
}

/// Scaled dot-product self-attention over `[T×d]`, masked so that padded
/// key positions receive exactly zero weight, plus the per-head attention
/// distributions for inspection.
pub fn multi_head_attention_probs<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionNodes,
    x: NodeId,
    mask: &[bool],
) -> Result<(NodeId, Vec<NodeId>), TensorError> {
    let t_len = tape.shape(x)[0];
    let d = tape.shape(x)[1];
    if mask.len() != t_len {
        return Err(TensorError::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|m| *m) {
        return Err(TensorError::AllMasked);
    }
    debug_assert_eq!(d % p.heads, 0, "d_model must be divisible by heads");
    let dh = d / p.heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let q = tape.matmul(x, p.wq)?;
    let q = tape.add_bias(q, p.bq)?;
    let k = tape.matmul(x, p.wk)?;
    let k = tape.add_bias(k, p.bk)?;
    let v = tape.matmul(x, p.wv)?;
    let v = tape.add_bias(v, p.bv)?;

    let mut head_outputs = Vec::with_capacity(p.heads);
    let mut head_probs = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_scalar(scores, scale);
        let masked = tape.mask_lastdim_neg_inf(scores, mask)?;
        let probs = tape.softmax_lastdim(masked);
        let ctx = tape.matmul(probs, vh)?;
        head_outputs.push(ctx);
        head_probs.push(probs);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let out = tape.matmul(merged, p.wo)?;
    let out = tape.add_bias(out, p.bo)?;
    Ok((out, head_probs))
}

/// Scaled dot-product self-attention; see [`multi_head_attention_probs`].
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionNodes,
    x: NodeId,
    mask: &[bool],
) -> Result<NodeId, TensorError> {
    multi_head_attention_probs(tape, p, x, mask).map(|(out, _)| out)
}

/// Post-layernorm encoder layer:
/// attention -> dropout -> residual -> layernorm -> feedforward -> dropout
/// -> residual -> layernorm.
pub fn encoder_layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    layer: &EncoderLayerNodes,
    x: NodeId,
    mask: &[bool],
    ln_eps: f64,
    drop: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    let eps = T::from_f64(ln_eps);
    let attn = multi_head_attention(tape, &layer.attn, x, mask)?;
    let attn = tape.dropout(attn, drop.p, drop.training, rng)?;
    let res = tape.add(x, attn)?;
    let h = tape.layer_norm(res, layer.attn_ln_gain, layer.attn_ln_bias, eps)?;

    let ff = tape.matmul(h, layer.ffn_in_w)?;
    let ff = tape.add_bias(ff, layer.ffn_in_b)?;
    let ff = match layer.activation {
        Activation::Gelu => tape.gelu(ff),
        Activation::Relu => tape.relu(ff),
    };
    let ff = tape.matmul(ff, layer.ffn_out_w)?;
    let ff = tape.add_bias(ff, layer.ffn_out_b)?;
    let ff = tape.dropout(ff, drop.p, drop.training, rng)?;
    let res2 = tape.add(h, ff)?;
    tape.layer_norm(res2, layer.ffn_ln_gain, layer.ffn_ln_bias, eps)
}

/// Token + position + segment(0) embeddings, layernormed, with dropout in
/// training mode.
pub fn embed_sequence<T: Scalar>(
    tape: &mut Tape<T>,
    emb: &EmbeddingNodes,
    token_ids: &[usize],
    positions: &[usize],
    ln_eps: f64,
    drop: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    if token_ids.len() != positions.len() {
        return Err(TensorError::ShapeMismatch {
            op: "embed_sequence",
            lhs: vec![token_ids.len()],
            rhs: vec![positions.len()],
        });
    }
    let tok = tape.gather(emb.token, token_ids)?;
    let pos = tape.gather(emb.position, positions)?;
    let seg = tape.gather(emb.segment, &vec![0; token_ids.len()])?;
    let sum = tape.add(tok, pos)?;
    let sum = tape.add(sum, seg)?;
    let normed = tape.layer_norm(sum, emb.ln_gain, emb.ln_bias, T::from_f64(ln_eps))?;
    tape.dropout(normed, drop.p, drop.training, rng)
}
