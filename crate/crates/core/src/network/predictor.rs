//! Prediction network: a single-layer LSTM over label embeddings with a
//! learned start state, stepped label by label so decoding can thread the
//! state incrementally.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};

use super::ModelConfig;

/// Hidden and cell state after consuming some label prefix.
#[derive(Debug, Clone, Copy)]
pub struct PredState {
    pub h: NodeId,
    pub c: NodeId,
}

pub fn start(tape: &mut Tape) -> Result<PredState> {
    Ok(PredState { h: tape.param("pred.h0")?, c: tape.param("pred.c0")? })
}

pub fn step(cfg: &ModelConfig, tape: &mut Tape, state: &PredState, label: usize) -> Result<PredState> {
    if label == 0 || label >= cfg.vocab_size {
        return Err(Error::usage(format!(
            "label id {label} outside [1, {})",
            cfg.vocab_size
        )));
    }
    let embed = tape.param("pred.embed")?;
    let x = tape.gather_rows(embed, &[label])?;

    let mut gates = Vec::with_capacity(4);
    for gate in ["i", "f", "g", "o"] {
        let wx = tape.param(&format!("pred.wx{gate}"))?;
        let wh = tape.param(&format!("pred.wh{gate}"))?;
        let b = tape.param(&format!("pred.b{gate}"))?;
        let from_x = tape.matmul(x, wx)?;
        let from_h = tape.matmul(state.h, wh)?;
        let pre = tape.add(from_x, from_h)?;
        gates.push(tape.add_bias_row(pre, b)?);
    }
    let input_gate = tape.sigmoid(gates[0])?;
    let forget_gate = tape.sigmoid(gates[1])?;
    let candidate = tape.tanh(gates[2])?;
    let output_gate = tape.sigmoid(gates[3])?;

    let kept = tape.mul(forget_gate, state.c)?;
    let written = tape.mul(input_gate, candidate)?;
    let c = tape.add(kept, written)?;
    let c_squashed = tape.tanh(c)?;
    let h = tape.mul(output_gate, c_squashed)?;
    Ok(PredState { h, c })
}

/// States for all prefixes of `prefix`: row j is the state after consuming
/// labels 1..=j, so the matrix has prefix.len() + 1 rows.
pub fn build(cfg: &ModelConfig, tape: &mut Tape, prefix: &[usize]) -> Result<NodeId> {
    let mut state = start(tape)?;
    let mut rows = vec![state.h];
    for &label in prefix {
        state = step(cfg, tape, &state, label)?;
        rows.push(state.h);
    }
    tape.concat_rows(&rows)
}
