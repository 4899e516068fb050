//! Last-token emission latency, measured against the labeled segment end.
//!
//! The reference point is the encoder frame containing the segment's final
//! feature frame; one encoder frame spans frame_ms * downsample_factor
//! milliseconds. Early emission yields a negative latency. Empty
//! hypotheses have no latency and are excluded from aggregates (counted
//! separately).

use crate::context::{segment_encoder_range, ContextWindow, Segment};
use crate::error::Result;

use super::DecodeResult;

pub fn last_token_latency_ms(
    result: &DecodeResult,
    window: &ContextWindow,
    segment: &Segment,
    frame_ms: f64,
    downsample_factor: usize,
) -> Result<Option<f64>> {
    let Some(&last) = result.emission_frames.last() else {
        return Ok(None);
    };
    let (_, seg_end) = segment_encoder_range(window, segment, downsample_factor)?;
    let delta = last as f64 - seg_end as f64;
    Ok(Some(delta * frame_ms * downsample_factor as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_context_window;
    use crate::eval::SegmentRef;
    use crate::network::Mode;
    use crate::synthdata::tests::session_with_lengths;

    fn result_with_emissions(frames: Vec<usize>) -> DecodeResult {
        DecodeResult {
            tokens: vec![1; frames.len()],
            emission_frames: frames,
            mode: Mode::Streaming,
            segment: SegmentRef { session_id: "s".to_string(), utterance: 0, segment: 0 },
        }
    }

    #[test]
    fn latency_arithmetic_with_downsampling() {
        // Segment ends at encoder frame 35 (frames [0, 108) at d = 3);
        // last emission at encoder frame 40; 10 ms features.
        let session = session_with_lengths(&[120], 2);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segment = Segment { start: 0, end: 108, labels: vec![1] };
        let r = result_with_emissions(vec![12, 40]);
        let ms = last_token_latency_ms(&r, &window, &segment, 10.0, 3).unwrap().unwrap();
        assert_eq!(ms, 150.0);
    }

    #[test]
    fn emission_at_segment_end_is_zero() {
        let session = session_with_lengths(&[20], 2);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segment = Segment { start: 0, end: 20, labels: vec![1] };
        let r = result_with_emissions(vec![19]);
        let ms = last_token_latency_ms(&r, &window, &segment, 10.0, 1).unwrap().unwrap();
        assert_eq!(ms, 0.0);
    }

    #[test]
    fn early_emission_is_negative() {
        let session = session_with_lengths(&[20], 2);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segment = Segment { start: 0, end: 20, labels: vec![1] };
        let r = result_with_emissions(vec![10]);
        let ms = last_token_latency_ms(&r, &window, &segment, 10.0, 1).unwrap().unwrap();
        assert_eq!(ms, -90.0);
    }

    #[test]
    fn empty_hypothesis_has_no_latency() {
        let session = session_with_lengths(&[20], 2);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segment = Segment { start: 0, end: 20, labels: vec![1] };
        let r = result_with_emissions(vec![]);
        assert!(last_token_latency_ms(&r, &window, &segment, 10.0, 1).unwrap().is_none());
    }
}
