//! The three trainable mechanisms around the frozen backbone: bottleneck
//! adapters on the text path, small transformer encoders that compress each
//! modality sequence into one token, and the per-layer feedforward fusion of
//! the backbone's CLS state with those tokens.

use rand_chacha::ChaCha8Rng;

use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, TensorError};
use crate::transformer::{encoder_layer_forward, DropoutCfg, EncoderLayerNodes};

/// Tape handles for one bottleneck adapter.
#[derive(Debug, Clone)]
pub struct AdapterNodes {
    pub down_w: NodeId,
    pub down_b: NodeId,
    pub up_w: NodeId,
    pub up_b: NodeId,
}

/// Tape handles for one modality encoder.
///
/// A learned position table covers the prepended CLS slot plus up to
/// `max_frames` input frames; without it the CLS read-out would be blind to
/// frame order.
#[derive(Debug, Clone)]
pub struct ModalityEncoderNodes {
    pub proj_in_w: NodeId,
    pub proj_in_b: NodeId,
    pub cls: NodeId,
    pub position: NodeId,
    pub layers: Vec<EncoderLayerNodes>,
    pub proj_out_w: NodeId,
    pub proj_out_b: NodeId,
}

/// Tape handles for one per-layer fusion feedforward.
#[derive(Debug, Clone)]
pub struct FusionLayerNodes {
    pub in_w: NodeId,
    pub in_b: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
}

/// Tape handles for the CLS down-projection, shared by all fusion layers.
#[derive(Debug, Clone)]
pub struct FusionProjNodes {
    pub w: NodeId,
    pub b: NodeId,
}

/// Bottleneck adapter: `x + up(relu(down(x)))`, applied rowwise.
pub fn adapter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    a: &AdapterNodes,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let h = tape.matmul(x, a.down_w)?;
    let h = tape.add_bias(h, a.down_b)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, a.up_w)?;
    let h = tape.add_bias(h, a.up_b)?;
    tape.add(x, h)
}

/// Pairs each backbone layer with its adapter; the counts must agree.
pub fn insert_adapters<'a>(
    layers: &'a [EncoderLayerNodes],
    adapters: &'a [AdapterNodes],
) -> Result<Vec<(&'a EncoderLayerNodes, &'a AdapterNodes)>, TensorError> {
    if layers.len() != adapters.len() {
        return Err(TensorError::ShapeMismatch {
            op: "insert_adapters",
            lhs: vec![layers.len()],
            rhs: vec![adapters.len()],
        });
    }
    Ok(layers.iter().zip(adapters.iter()).collect())
}

/// Compresses a `[T×d_mod]` feature sequence into a single `[1×d_tok]`
/// modality token: project, prepend a learnable CLS vector, add positions,
/// run the encoder layers, then project the CLS output.
pub fn modality_encode<T: Scalar>(
    tape: &mut Tape<T>,
    enc: &ModalityEncoderNodes,
    seq: NodeId,
    mask: &[bool],
    ln_eps: f64,
    drop: DropoutCfg,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, TensorError> {
    let t_len = tape.shape(seq)[0];
    if t_len == 0 {
        return Err(TensorError::EmptySequence {
            op: "modality_encode",
        });
    }
    if mask.len() != t_len {
        return Err(TensorError::ShapeMismatch {
            op: "modality_encode",
            lhs: tape.shape(seq).to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let d_enc = tape.shape(enc.proj_in_w)[1];
    let x = tape.matmul(seq, enc.proj_in_w)?;
    let x = tape.add_bias(x, enc.proj_in_b)?;
    let cls_row = tape.reshape(enc.cls, vec![1, d_enc])?;
    let mut with_cls = tape.concat_rows(&[cls_row, x])?;

    let positions: Vec<usize> = (0..=t_len).collect();
    let pos = tape.gather(enc.position, &positions)?;
    with_cls = tape.add(with_cls, pos)?;

    let mut full_mask = Vec::with_capacity(t_len + 1);
    full_mask.push(true);
    full_mask.extend_from_slice(mask);
    let mut h = with_cls;
    for layer in &enc.layers {
        h = encoder_layer_forward(tape, layer, h, &full_mask, ln_eps, drop, rng)?;
    }
    let cls_out = tape.slice_rows(h, 0, 1)?;
    let out = tape.matmul(cls_out, enc.proj_out_w)?;
    tape.add_bias(out, enc.proj_out_b)
}

/// Layer-wise fusion: the CLS hidden state is down-projected, concatenated
/// with the two modality tokens, and passed through a ReLU feedforward. The
/// backbone stream itself is left untouched.
pub fn ffn_fusion<T: Scalar>(
    tape: &mut Tape<T>,
    proj: &FusionProjNodes,
    layer: &FusionLayerNodes,
    cls_hidden: NodeId,
    v_tok: NodeId,
    a_tok: NodeId,
) -> Result<NodeId, TensorError> {
    let p = tape.matmul(cls_hidden, proj.w)?;
    let p = tape.add_bias(p, proj.b)?;
    let cat = tape.concat_cols(&[p, v_tok, a_tok])?;
    let h = tape.matmul(cat, layer.in_w)?;
    let h = tape.add_bias(h, layer.in_b)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, layer.out_w)?;
    tape.add_bias(out, layer.out_b)
}
