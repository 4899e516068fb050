//! Contextual-utterance window assembly and per-segment encoding slicing.
//!
//! A window concatenates up to P immediate predecessors, the current
//! utterance, and up to F successors from the same session, in temporal
//! order, with an exact offset map back to current-utterance frame indices.
//! The student variant is the same window restricted to F = 0; combined
//! with a strictly causal encoder this realizes per-frame truncation
//! without re-encoding.

use crate::error::{Error, Result};
use crate::synthdata::Session;
use crate::tensor::Tensor;

/// A labeled sub-span of an utterance: frame range [start, end) plus the
/// target token ids.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub labels: Vec<usize>,
}

impl Segment {
    pub fn validate(&self, utterance_len: usize) -> Result<()> {
        if self.start >= self.end || self.end > utterance_len {
            return Err(Error::usage(format!(
                "segment [{}, {}) outside utterance of {utterance_len} frames",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Concatenated features for one utterance plus its context.
#[derive(Debug, Clone)]
pub struct ContextWindow {
    pub features: Tensor,
    /// Frame index where the current utterance begins (total length of the
    /// included past utterances plus separators).
    pub current_offset: usize,
    pub current_length: usize,
    pub past_used: usize,
    pub future_used: usize,
}

impl ContextWindow {
    pub fn total_frames(&self) -> usize {
        self.features.rows()
    }
}

/// Assembly options; `separator_frames` inserts that many zero frames
/// between consecutive utterances (default none).
#[derive(Debug, Clone, Copy, Default)]
pub struct WindowOptions {
    pub separator_frames: usize,
}

pub fn build_context_window(
    session: &Session,
    index: usize,
    past: usize,
    future: usize,
) -> Result<ContextWindow> {
    build_context_window_opts(session, index, past, future, WindowOptions::default())
}

pub fn build_context_window_opts(
    session: &Session,
    index: usize,
    past: usize,
    future: usize,
    opts: WindowOptions,
) -> Result<ContextWindow> {
    let utterances = &session.utterances;
    if index >= utterances.len() {
        return Err(Error::usage(format!(
            "utterance index {index} outside session of {}",
            utterances.len()
        )));
    }
    // Clamp, don't pad: use what the session actually has.
    let past_used = past.min(index);
    let future_used = future.min(utterances.len() - 1 - index);
    let first = index - past_used;
    let last = index + future_used;

    let dim = utterances[index].features.cols();
    let mut data: Vec<f64> = Vec::new();
    let mut current_offset = 0;
    let mut rows = 0;
    for (k, utt) in utterances[first..=last].iter().enumerate() {
        if k > 0 && opts.separator_frames > 0 {
            data.extend(std::iter::repeat_n(0.0, opts.separator_frames * dim));
            rows += opts.separator_frames;
        }
        if first + k == index {
            current_offset = rows;
        }
        data.extend_from_slice(utt.features.data());
        rows += utt.features.rows();
    }
    Ok(ContextWindow {
        features: Tensor::new(vec![rows, dim], data)?,
        current_offset,
        current_length: utterances[index].features.rows(),
        past_used,
        future_used,
    })
}

/// The window visible to the student: same past, no future.
pub fn student_window(session: &Session, index: usize, past: usize) -> Result<ContextWindow> {
    build_context_window(session, index, past, 0)
}

pub fn student_window_opts(
    session: &Session,
    index: usize,
    past: usize,
    opts: WindowOptions,
) -> Result<ContextWindow> {
    build_context_window_opts(session, index, past, 0, opts)
}

/// Inclusive encoder-frame range covering a segment of the current
/// utterance: both ends map by floor division, so a boundary that lands
/// inside a downsampled group includes that group.
pub fn segment_encoder_range(
    window: &ContextWindow,
    segment: &Segment,
    downsample_factor: usize,
) -> Result<(usize, usize)> {
    segment.validate(window.current_length)?;
    let lo = (window.current_offset + segment.start) / downsample_factor;
    let hi = (window.current_offset + segment.end - 1) / downsample_factor;
    Ok((lo, hi))
}

/// Number of encoder frames a segment spans.
pub fn segment_encoded_len(
    window: &ContextWindow,
    segment: &Segment,
    downsample_factor: usize,
) -> Result<usize> {
    let (lo, hi) = segment_encoder_range(window, segment, downsample_factor)?;
    Ok(hi - lo + 1)
}

/// Slice the rows of an encoded window that belong to a segment.
pub fn slice_segment_encodings(
    encodings: &Tensor,
    window: &ContextWindow,
    segment: &Segment,
    downsample_factor: usize,
) -> Result<Tensor> {
    let (lo, hi) = segment_encoder_range(window, segment, downsample_factor)?;
    if hi >= encodings.rows() {
        return Err(Error::usage(format!(
            "segment maps to encoder frames {lo}..={hi} but only {} exist",
            encodings.rows()
        )));
    }
    let n = encodings.cols();
    let data = encodings.data()[lo * n..(hi + 1) * n].to_vec();
    Tensor::new(vec![hi - lo + 1, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::tests::session_with_lengths;

    #[test]
    fn window_arithmetic_middle_of_session() {
        let session = session_with_lengths(&[10, 20, 15], 3);
        let w = build_context_window(&session, 1, 1, 1).unwrap();
        assert_eq!(w.total_frames(), 45);
        assert_eq!(w.current_offset, 10);
        assert_eq!(w.current_length, 20);
        assert_eq!((w.past_used, w.future_used), (1, 1));
    }

    #[test]
    fn clamps_at_session_start() {
        let session = session_with_lengths(&[10, 20, 15], 3);
        let w = build_context_window(&session, 0, 2, 0).unwrap();
        assert_eq!(w.past_used, 0);
        assert_eq!(w.current_offset, 0);
        assert_eq!(w.total_frames(), 10);
    }

    #[test]
    fn no_context_is_identity() {
        let session = session_with_lengths(&[10, 20, 15], 3);
        let w = build_context_window(&session, 1, 0, 0).unwrap();
        assert_eq!(w.current_offset, 0);
        assert_eq!(w.total_frames(), 20);
        assert_eq!(w.features.data(), session.utterances[1].features.data());
    }

    #[test]
    fn offset_region_matches_current_utterance_exactly() {
        let session = session_with_lengths(&[7, 12, 9, 14], 4);
        for index in 0..4 {
            for (p, f) in [(0, 0), (1, 1), (2, 2), (3, 0), (0, 3)] {
                let w = build_context_window(&session, index, p, f).unwrap();
                let dim = w.features.cols();
                let cur = &session.utterances[index].features;
                let lo = w.current_offset * dim;
                let hi = lo + cur.numel();
                assert_eq!(&w.features.data()[lo..hi], cur.data());
            }
        }
    }

    #[test]
    fn separator_frames_shift_offsets() {
        let session = session_with_lengths(&[10, 20], 2);
        let opts = WindowOptions { separator_frames: 2 };
        let w = build_context_window_opts(&session, 1, 1, 0, opts).unwrap();
        assert_eq!(w.total_frames(), 32);
        assert_eq!(w.current_offset, 12);
        let dim = w.features.cols();
        for frame in 10..12 {
            assert!(w.features.row(frame).iter().all(|v| *v == 0.0));
        }
        let cur = &session.utterances[1].features;
        assert_eq!(&w.features.data()[12 * dim..], cur.data());
    }

    #[test]
    fn student_window_equals_future_free_window() {
        let session = session_with_lengths(&[10, 20, 15], 3);
        for index in 0..3 {
            for past in 0..3 {
                let a = student_window(&session, index, past).unwrap();
                let b = build_context_window(&session, index, past, 0).unwrap();
                assert_eq!(a.features.data(), b.features.data());
                assert_eq!(a.current_offset, b.current_offset);
                assert_eq!(a.future_used, 0);
            }
        }
    }

    #[test]
    fn student_window_ignores_future_utterances_bitwise() {
        let mut session = session_with_lengths(&[10, 20, 15], 3);
        let before = student_window(&session, 1, 1).unwrap();
        for v in session.utterances[2].features.data_mut() {
            *v += 100.0;
        }
        let after = student_window(&session, 1, 1).unwrap();
        assert_eq!(before.features.data(), after.features.data());
    }

    #[test]
    fn slice_arithmetic_with_offset() {
        let session = session_with_lengths(&[10, 20], 2);
        let w = build_context_window(&session, 1, 1, 0).unwrap();
        let seg = Segment { start: 3, end: 7, labels: vec![1] };
        assert_eq!(segment_encoder_range(&w, &seg, 1).unwrap(), (13, 16));
    }

    #[test]
    fn slice_arithmetic_with_downsampling() {
        let session = session_with_lengths(&[20], 1);
        let w = build_context_window(&session, 0, 0, 0).unwrap();
        let seg = Segment { start: 6, end: 12, labels: vec![1] };
        assert_eq!(segment_encoder_range(&w, &seg, 3).unwrap(), (2, 3));
    }

    #[test]
    fn full_utterance_segment_is_identity_slice() {
        let session = session_with_lengths(&[9], 1);
        let w = build_context_window(&session, 0, 0, 0).unwrap();
        let seg = Segment { start: 0, end: 9, labels: vec![1] };
        assert_eq!(segment_encoder_range(&w, &seg, 1).unwrap(), (0, 8));
        let enc = w.features.clone();
        let sliced = slice_segment_encodings(&enc, &w, &seg, 1).unwrap();
        assert_eq!(sliced.data(), enc.data());
    }

    #[test]
    fn segment_outside_current_utterance_rejected() {
        let session = session_with_lengths(&[10, 20], 2);
        let w = build_context_window(&session, 0, 0, 1).unwrap();
        // Current utterance is 10 frames; [8, 12) leaks into the future one.
        let seg = Segment { start: 8, end: 12, labels: vec![1] };
        assert!(segment_encoder_range(&w, &seg, 1).is_err());
        let empty = Segment { start: 4, end: 4, labels: vec![1] };
        assert!(empty.validate(10).is_err());
    }
}
