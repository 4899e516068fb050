//! Encoder graph: frame stacking, input projection, sinusoidal positions,
//! then pre-norm blocks of self-attention, optional depthwise convolution,
//! and a feed-forward stack.
//!
//! Streaming mode masks attention to j <= i and pads the convolution on the
//! left only; non-streaming attends everywhere and pads symmetrically. Both
//! read the same parameters.

use std::rc::Rc;

use crate::autodiff::{AttentionMask, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Mode, ModelConfig};

pub fn build(
    cfg: &ModelConfig,
    tape: &mut Tape,
    features: &Tensor,
    mode: Mode,
    position_base: usize,
) -> Result<NodeId> {
    if features.cols() != cfg.feature_dim {
        return Err(Error::usage(format!(
            "features have dim {}, expected {}",
            features.cols(),
            cfg.feature_dim
        )));
    }
    if features.rows() == 0 {
        return Err(Error::usage("empty feature sequence".to_string()));
    }
    let enc = &cfg.encoder;
    let x = tape.input(features.clone())?;
    let stacked = tape.stack_frames(x, enc.downsample_factor)?;
    let w_in = tape.param("enc.input.w")?;
    let b_in = tape.param("enc.input.b")?;
    let projected = tape.matmul(stacked, w_in)?;
    let mut h = tape.add_bias_row(projected, b_in)?;

    // Positions are anchored to the current utterance: the frame at
    // `position_base` sits at position zero, past context runs negative.
    // Phase-1 training (no context) and context windows then present the
    // current utterance identically.
    let t_len = tape.value(h).rows();
    let base = (position_base / enc.downsample_factor) as isize;
    let pos = tape.input(sinusoidal_positions(t_len, enc.model_dim, base))?;
    h = tape.add(h, pos)?;

    let mask = match mode {
        Mode::Streaming => Some(causal_mask(t_len)),
        Mode::Nonstreaming => None,
    };
    let causal = matches!(mode, Mode::Streaming);

    for b in 0..enc.num_blocks {
        let p = format!("enc.block{b}");
        h = attention_sublayer(cfg, tape, h, &p, mask.clone())?;
        if enc.use_depthwise_conv {
            h = conv_sublayer(tape, h, &p, causal)?;
        }
        h = feedforward_sublayer(tape, h, &p)?;
    }

    let gain = tape.param("enc.final_ln.gain")?;
    let bias = tape.param("enc.final_ln.bias")?;
    tape.layer_norm_rows(h, gain, bias)
}

fn attention_sublayer(
    cfg: &ModelConfig,
    tape: &mut Tape,
    x: NodeId,
    prefix: &str,
    mask: Option<AttentionMask>,
) -> Result<NodeId> {
    let enc = &cfg.encoder;
    let head_dim = enc.model_dim / enc.num_heads;
    let gain = tape.param(&format!("{prefix}.attn.ln.gain"))?;
    let bias = tape.param(&format!("{prefix}.attn.ln.bias"))?;
    let normed = tape.layer_norm_rows(x, gain, bias)?;

    let wq = tape.param(&format!("{prefix}.attn.wq"))?;
    let bq = tape.param(&format!("{prefix}.attn.bq"))?;
    let wk = tape.param(&format!("{prefix}.attn.wk"))?;
    let bk = tape.param(&format!("{prefix}.attn.bk"))?;
    let wv = tape.param(&format!("{prefix}.attn.wv"))?;
    let bv = tape.param(&format!("{prefix}.attn.bv"))?;
    let wo = tape.param(&format!("{prefix}.attn.wo"))?;
    let bo = tape.param(&format!("{prefix}.attn.bo"))?;

    let q_all = tape.matmul(normed, wq)?;
    let q_all = tape.add_bias_row(q_all, bq)?;
    let k_all = tape.matmul(normed, wk)?;
    let k_all = tape.add_bias_row(k_all, bk)?;
    let v_all = tape.matmul(normed, wv)?;
    let v_all = tape.add_bias_row(v_all, bv)?;

    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut merged: Option<NodeId> = None;
    for head in 0..enc.num_heads {
        let start = head * head_dim;
        let q = tape.slice_cols(q_all, start, head_dim)?;
        let k = tape.slice_cols(k_all, start, head_dim)?;
        let v = tape.slice_cols(v_all, start, head_dim)?;
        let scores = tape.matmul_transpose_b(q, k)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax_rows(scores, mask.clone())?;
        let context = tape.matmul(weights, v)?;
        let out_rows = tape.slice_rows(wo, start, head_dim)?;
        let projected = tape.matmul(context, out_rows)?;
        merged = Some(match merged {
            Some(acc) => tape.add(acc, projected)?,
            None => projected,
        });
    }
    let attended = tape.add_bias_row(merged.expect("at least one head"), bo)?;
    tape.add(x, attended)
}

fn conv_sublayer(tape: &mut Tape, x: NodeId, prefix: &str, causal: bool) -> Result<NodeId> {
    let gain = tape.param(&format!("{prefix}.conv.ln.gain"))?;
    let bias = tape.param(&format!("{prefix}.conv.ln.bias"))?;
    let normed = tape.layer_norm_rows(x, gain, bias)?;
    let kernel = tape.param(&format!("{prefix}.conv.kernel"))?;
    let convolved = tape.depthwise_conv(normed, kernel, causal)?;
    tape.add(x, convolved)
}

fn feedforward_sublayer(tape: &mut Tape, x: NodeId, prefix: &str) -> Result<NodeId> {
    let gain = tape.param(&format!("{prefix}.ff.ln.gain"))?;
    let bias = tape.param(&format!("{prefix}.ff.ln.bias"))?;
    let normed = tape.layer_norm_rows(x, gain, bias)?;
    let w1 = tape.param(&format!("{prefix}.ff.w1"))?;
    let b1 = tape.param(&format!("{prefix}.ff.b1"))?;
    let w2 = tape.param(&format!("{prefix}.ff.w2"))?;
    let b2 = tape.param(&format!("{prefix}.ff.b2"))?;
    let hidden = tape.matmul(normed, w1)?;
    let hidden = tape.add_bias_row(hidden, b1)?;
    let hidden = tape.relu(hidden)?;
    let out = tape.matmul(hidden, w2)?;
    let out = tape.add_bias_row(out, b2)?;
    tape.add(x, out)
}

/// Lower-triangular attention mask: position i attends to j <= i.
pub fn causal_mask(n: usize) -> AttentionMask {
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            mask[i * n + j] = true;
        }
    }
    Rc::new(mask)
}

/// Fixed sinusoidal positional encodings for positions `-base .. t_len-base`.
fn sinusoidal_positions(t_len: usize, dim: usize, base: isize) -> Tensor {
    let mut data = vec![0.0; t_len * dim];
    for t in 0..t_len {
        let p = (t as isize - base) as f64;
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = (p * rate).sin();
            data[t * dim + 2 * i + 1] = (p * rate).cos();
        }
        if dim % 2 == 1 {
            let rate = 1.0 / 10000f64.powf((dim - 1) as f64 / dim as f64);
            data[t * dim + dim - 1] = (p * rate).sin();
        }
    }
    Tensor::new(vec![t_len, dim], data).expect("positional shape")
}
