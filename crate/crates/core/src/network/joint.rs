//! Joint network: project encoder frames and prediction states into a
//! shared space, combine every (t, u) pair additively, squash with tanh,
//! and read out vocabulary logits.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;

/// Logits for all pairs: rows ordered (t, u) row-major, i.e. row t*(U+1)+u.
pub fn build(tape: &mut Tape, enc: NodeId, pred: NodeId) -> Result<NodeId> {
    let we = tape.param("joint.enc_proj")?;
    let wp = tape.param("joint.pred_proj")?;
    let b1 = tape.param("joint.b1")?;
    let out = tape.param("joint.out")?;
    let b2 = tape.param("joint.b2")?;

    let enc_proj = tape.matmul(enc, we)?;
    let pred_proj = tape.matmul(pred, wp)?;
    let combined = tape.outer_add_rows(enc_proj, pred_proj)?;
    let combined = tape.add_bias_row(combined, b1)?;
    let hidden = tape.tanh(combined)?;
    let logits = tape.matmul(hidden, out)?;
    tape.add_bias_row(logits, b2)
}
