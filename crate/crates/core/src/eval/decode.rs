//! Greedy transducer decoding over a sliced segment.
//!
//! Per encoder frame: query the joint network against the current
//! prediction state and take the argmax; a non-blank emission advances the
//! prediction state and is recorded with its frame index, blank (or the
//! per-frame symbol cap) advances the frame.

use crate::autodiff::Tape;
use crate::context::{segment_encoder_range, ContextWindow, Segment};
use crate::error::{Error, Result};
use crate::lattice::BLANK;
use crate::network::{Mode, Model};
use crate::params::ParameterStore;

/// Which segment a decode belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentRef {
    pub session_id: String,
    pub utterance: usize,
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Window-absolute encoder frame at which each token was emitted;
    /// nondecreasing by construction.
    pub emission_frames: Vec<usize>,
    pub mode: Mode,
    pub segment: SegmentRef,
}

pub fn greedy_decode(
    model: &Model,
    store: &ParameterStore,
    window: &ContextWindow,
    segment: &Segment,
    segment_ref: SegmentRef,
    mode: Mode,
    max_symbols_per_frame: usize,
) -> Result<DecodeResult> {
    if max_symbols_per_frame < 1 {
        return Err(Error::usage("max_symbols_per_frame must be >= 1".to_string()));
    }
    if matches!(mode, Mode::Streaming) && window.future_used > 0 {
        return Err(Error::usage("student cannot see future utterances".to_string()));
    }
    let d = model.config().encoder.downsample_factor;
    let (lo, hi) = segment_encoder_range(window, segment, d)?;

    let mut tape = Tape::new(store);
    let enc = model.encoder_nodes_at(&mut tape, &window.features, mode, window.current_offset)?;
    if hi >= tape.value(enc).rows() {
        return Err(Error::usage(format!(
            "segment needs encoder frames up to {hi}, window has {}",
            tape.value(enc).rows()
        )));
    }

    let mut state = model.predictor_start(&mut tape)?;
    let mut tokens = Vec::new();
    let mut emission_frames = Vec::new();
    for t in lo..=hi {
        let frame = tape.slice_rows(enc, t, 1)?;
        let mut emitted = 0;
        loop {
            let logits = model.joint_nodes(&mut tape, frame, state.h)?;
            let best = argmax(tape.value(logits).data());
            if best == BLANK {
                break;
            }
            tokens.push(best);
            emission_frames.push(t);
            state = model.predictor_step(&mut tape, &state, best)?;
            emitted += 1;
            if emitted >= max_symbols_per_frame {
                break;
            }
        }
    }
    Ok(DecodeResult { tokens, emission_frames, mode, segment: segment_ref })
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
