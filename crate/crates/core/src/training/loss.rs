//! Per-utterance losses over labeled segments.
//!
//! Single-mode: encode the window once in the requested mode, slice each
//! segment's encoder frames, and sum the transducer losses. Dual-mode: the
//! teacher encodes its full window without masking while the student
//! encodes the future-free window causally — both through the same
//! parameter nodes — and each segment contributes teacher + student + beta
//! times the lattice KL between the two.

use crate::autodiff::{NodeId, Tape};
use crate::context::{segment_encoder_range, ContextWindow, Segment};
use crate::error::{Error, Result};
use crate::lattice::DistillMode;
use crate::network::{Mode, Model};
use crate::params::ParameterStore;

/// Loss values for one segment of a dual-mode pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentLosses {
    pub teacher: f64,
    pub student: f64,
    pub distill: f64,
}

/// Per-segment values plus totals for one utterance (Eq.-style breakdown).
#[derive(Debug, Clone, PartialEq)]
pub struct DualModeLossBreakdown {
    pub per_segment: Vec<SegmentLosses>,
    pub total: f64,
    pub teacher_total: f64,
    pub student_total: f64,
    pub distill_total: f64,
    pub beta: f64,
}

impl DualModeLossBreakdown {
    pub fn num_segments(&self) -> usize {
        self.per_segment.len()
    }

    /// Recompose the total from the per-segment triples, in segment order.
    pub fn recomposed_total(&self) -> f64 {
        self.per_segment
            .iter()
            .fold(0.0, |acc, s| acc + (s.teacher + s.student + self.beta * s.distill))
    }
}

fn check_streaming_window(mode: Mode, window: &ContextWindow) -> Result<()> {
    if matches!(mode, Mode::Streaming) && window.future_used > 0 {
        return Err(Error::usage("student cannot see future utterances".to_string()));
    }
    Ok(())
}

/// Graph for the summed single-mode segment loss; returns the scalar node.
pub fn single_mode_loss_nodes(
    model: &Model,
    tape: &mut Tape,
    window: &ContextWindow,
    segments: &[Segment],
    mode: Mode,
) -> Result<NodeId> {
    check_streaming_window(mode, window)?;
    if segments.is_empty() {
        return Err(Error::usage("no labeled segments".to_string()));
    }
    let d = model.config().encoder.downsample_factor;
    let enc = model.encoder_nodes_at(tape, &window.features, mode, window.current_offset)?;
    let mut total: Option<NodeId> = None;
    for segment in segments {
        let (lo, hi) = segment_encoder_range(window, segment, d)?;
        let enc_seg = tape.slice_rows(enc, lo, hi - lo + 1)?;
        let pred = model.predictor_nodes(tape, &segment.labels)?;
        let logits = model.joint_nodes(tape, enc_seg, pred)?;
        let loss = tape.rnnt_loss(logits, &segment.labels, hi - lo + 1)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("validated nonempty"))
}

/// Summed segment loss for one window in one mode.
pub fn single_mode_loss(
    model: &Model,
    store: &ParameterStore,
    window: &ContextWindow,
    segments: &[Segment],
    mode: Mode,
) -> Result<f64> {
    let mut tape = Tape::new(store);
    let node = single_mode_loss_nodes(model, &mut tape, window, segments, mode)?;
    Ok(tape.value(node).data()[0])
}

/// Node handles from one dual-mode utterance pass.
#[derive(Debug)]
pub struct DualLossNodes {
    pub total: NodeId,
    pub per_segment: Vec<(NodeId, NodeId, NodeId)>,
}

/// Graph for the dual-mode utterance loss.
///
/// The student window must be the teacher window restricted to F = 0: same
/// past count, same current utterance placement.
pub fn dual_mode_loss_nodes(
    model: &Model,
    tape: &mut Tape,
    teacher_window: &ContextWindow,
    student_window: &ContextWindow,
    segments: &[Segment],
    beta: f64,
    mode: DistillMode,
) -> Result<DualLossNodes> {
    if segments.is_empty() {
        return Err(Error::usage("no labeled segments".to_string()));
    }
    if student_window.future_used != 0
        || student_window.past_used != teacher_window.past_used
        || student_window.current_offset != teacher_window.current_offset
        || student_window.current_length != teacher_window.current_length
    {
        return Err(Error::usage(
            "window mismatch: student must be the teacher window without future".to_string(),
        ));
    }
    let shared = student_window.features.numel();
    if teacher_window.features.data()[..shared] != *student_window.features.data() {
        return Err(Error::usage(
            "window mismatch: student features are not a prefix of the teacher's".to_string(),
        ));
    }

    let d = model.config().encoder.downsample_factor;
    let teacher_enc = model.encoder_nodes_at(
        tape,
        &teacher_window.features,
        Mode::Nonstreaming,
        teacher_window.current_offset,
    )?;
    let student_enc = model.encoder_nodes_at(
        tape,
        &student_window.features,
        Mode::Streaming,
        student_window.current_offset,
    )?;

    let mut total: Option<NodeId> = None;
    let mut per_segment = Vec::with_capacity(segments.len());
    for segment in segments {
        let (lo, hi) = segment_encoder_range(student_window, segment, d)?;
        let frames = hi - lo + 1;
        let t_seg = tape.slice_rows(teacher_enc, lo, frames)?;
        let s_seg = tape.slice_rows(student_enc, lo, frames)?;
        let pred = model.predictor_nodes(tape, &segment.labels)?;
        let t_logits = model.joint_nodes(tape, t_seg, pred)?;
        let s_logits = model.joint_nodes(tape, s_seg, pred)?;
        let t_loss = tape.rnnt_loss(t_logits, &segment.labels, frames)?;
        let s_loss = tape.rnnt_loss(s_logits, &segment.labels, frames)?;
        let kl = tape.lattice_distillation(t_logits, s_logits, &segment.labels, frames, mode)?;
        let weighted = tape.scale(kl, beta)?;
        let pair = tape.add(t_loss, s_loss)?;
        let segment_total = tape.add(pair, weighted)?;
        per_segment.push((t_loss, s_loss, kl));
        total = Some(match total {
            Some(acc) => tape.add(acc, segment_total)?,
            None => segment_total,
        });
    }
    Ok(DualLossNodes { total: total.expect("validated nonempty"), per_segment })
}

/// Dual-mode utterance loss with its per-segment breakdown.
pub fn dual_mode_loss(
    model: &Model,
    store: &ParameterStore,
    teacher_window: &ContextWindow,
    student_window: &ContextWindow,
    segments: &[Segment],
    beta: f64,
    mode: DistillMode,
) -> Result<DualModeLossBreakdown> {
    let mut tape = Tape::new(store);
    let nodes =
        dual_mode_loss_nodes(model, &mut tape, teacher_window, student_window, segments, beta, mode)?;
    let per_segment: Vec<SegmentLosses> = nodes
        .per_segment
        .iter()
        .map(|(t, s, k)| SegmentLosses {
            teacher: tape.value(*t).data()[0],
            student: tape.value(*s).data()[0],
            distill: tape.value(*k).data()[0],
        })
        .collect();
    Ok(DualModeLossBreakdown {
        total: tape.value(nodes.total).data()[0],
        teacher_total: per_segment.iter().map(|s| s.teacher).sum(),
        student_total: per_segment.iter().map(|s| s.student).sum(),
        distill_total: per_segment.iter().map(|s| s.distill).sum(),
        per_segment,
        beta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::build_context_window;
    use crate::network::{EncoderConfig, ModelConfig};
    use crate::synthdata::tests::session_with_lengths;

    fn tiny_model(vocab: usize) -> Model {
        Model::new(ModelConfig {
            feature_dim: 3,
            vocab_size: vocab,
            encoder: EncoderConfig {
                num_blocks: 1,
                model_dim: 8,
                num_heads: 2,
                feedforward_dim: 8,
                use_depthwise_conv: false,
                conv_kernel: 3,
                downsample_factor: 1,
            },
            pred_dim: 4,
            joint_dim: 6,
        })
        .unwrap()
    }

    fn zero_joint_output(store: &mut ParameterStore) {
        for name in ["joint.out", "joint.b2"] {
            for v in store.tensor_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
    }

    #[test]
    fn one_frame_one_label_uniform_joint_hits_closed_form() {
        let model = tiny_model(3);
        let mut store = model.init_params(1).unwrap();
        zero_joint_output(&mut store);
        let session = session_with_lengths(&[1], 3);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 1, labels: vec![1] }];
        for mode in [Mode::Streaming, Mode::Nonstreaming] {
            let loss = single_mode_loss(&model, &store, &window, &segments, mode).unwrap();
            assert!((loss - 2.0 * 3f64.ln()).abs() < 1e-12, "{mode}: {loss}");
        }
    }

    #[test]
    fn disjoint_segments_add() {
        let model = tiny_model(5);
        let store = model.init_params(2).unwrap();
        let session = session_with_lengths(&[12], 3);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let a = Segment { start: 0, end: 5, labels: vec![1, 2] };
        let b = Segment { start: 7, end: 12, labels: vec![3] };
        let together = single_mode_loss(
            &model,
            &store,
            &window,
            &[a.clone(), b.clone()],
            Mode::Nonstreaming,
        )
        .unwrap();
        let separate = single_mode_loss(&model, &store, &window, &[a], Mode::Nonstreaming).unwrap()
            + single_mode_loss(&model, &store, &window, &[b], Mode::Nonstreaming).unwrap();
        assert!((together - separate).abs() < 1e-12);
    }

    #[test]
    fn matches_hand_composed_pipeline() {
        let model = tiny_model(5);
        let store = model.init_params(3).unwrap();
        let session = session_with_lengths(&[6, 8], 3);
        let window = build_context_window(&session, 1, 1, 0).unwrap();
        let segment = Segment { start: 2, end: 7, labels: vec![2, 4] };
        let via_loss =
            single_mode_loss(&model, &store, &window, &[segment.clone()], Mode::Streaming)
                .unwrap();

        // Hand-composed: encode, slice rows, predict, join, lattice loss.
        let mut tape = Tape::new(&store);
        let enc = model.encoder_nodes(&mut tape, &window.features, Mode::Streaming).unwrap();
        let (lo, hi) = segment_encoder_range(&window, &segment, 1).unwrap();
        let enc_seg = tape.slice_rows(enc, lo, hi - lo + 1).unwrap();
        let pred = model.predictor_nodes(&mut tape, &segment.labels).unwrap();
        let logits = model.joint_nodes(&mut tape, enc_seg, pred).unwrap();
        let lat = crate::lattice::LatticeTensor::from_logits(
            tape.value(logits),
            &segment.labels,
            hi - lo + 1,
        )
        .unwrap();
        let (by_hand, _) = crate::lattice::rnnt_loss(&lat).unwrap();
        assert!((via_loss - by_hand).abs() < 1e-12);
    }

    #[test]
    fn streaming_window_with_future_rejected() {
        let model = tiny_model(5);
        let store = model.init_params(4).unwrap();
        let session = session_with_lengths(&[6, 8], 3);
        let window = build_context_window(&session, 0, 0, 1).unwrap();
        let segments = vec![Segment { start: 0, end: 6, labels: vec![1] }];
        let err = single_mode_loss(&model, &store, &window, &segments, Mode::Streaming)
            .unwrap_err();
        assert!(err.to_string().contains("future"));
    }

    #[test]
    fn beta_zero_collapses_to_teacher_plus_student() {
        let model = tiny_model(5);
        let store = model.init_params(5).unwrap();
        let session = session_with_lengths(&[8, 10, 6], 3);
        let teacher = build_context_window(&session, 1, 1, 1).unwrap();
        let student = build_context_window(&session, 1, 1, 0).unwrap();
        let segments = vec![
            Segment { start: 0, end: 5, labels: vec![1, 2] },
            Segment { start: 5, end: 10, labels: vec![3] },
        ];
        let b = dual_mode_loss(
            &model,
            &store,
            &teacher,
            &student,
            &segments,
            0.0,
            DistillMode::Collapsed3,
        )
        .unwrap();
        assert_eq!(b.num_segments(), 2);
        assert_eq!(b.total, b.teacher_total + b.student_total);
        assert!(b.distill_total > 0.0, "modes differ, KL should be positive");
    }

    #[test]
    fn beta_linearity_and_recomposition() {
        let model = tiny_model(5);
        let store = model.init_params(6).unwrap();
        let session = session_with_lengths(&[8, 10, 6], 3);
        let teacher = build_context_window(&session, 1, 1, 1).unwrap();
        let student = build_context_window(&session, 1, 1, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 10, labels: vec![1, 2, 3] }];
        let eval = |beta: f64| {
            dual_mode_loss(
                &model,
                &store,
                &teacher,
                &student,
                &segments,
                beta,
                DistillMode::Collapsed3,
            )
            .unwrap()
        };
        let (b1, b2) = (eval(2e-3), eval(7e-3));
        assert!((b1.total - b1.recomposed_total()).abs() < 1e-12);
        assert!((b2.total - b2.recomposed_total()).abs() < 1e-12);
        let lhs = b2.total - b1.total;
        let rhs = (7e-3 - 2e-3) * b1.distill_total;
        assert!((lhs - rhs).abs() < 1e-12, "beta linearity: {lhs} vs {rhs}");
    }

    #[test]
    fn single_frame_utterance_without_future_has_zero_distill() {
        let model = tiny_model(3);
        let store = model.init_params(7).unwrap();
        let session = session_with_lengths(&[1], 3);
        let window = build_context_window(&session, 0, 0, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 1, labels: vec![1] }];
        let b = dual_mode_loss(
            &model,
            &store,
            &window,
            &window,
            &segments,
            1.0,
            DistillMode::Full,
        )
        .unwrap();
        assert_eq!(b.distill_total, 0.0);
        assert_eq!(b.per_segment[0].teacher, b.per_segment[0].student);
    }

    #[test]
    fn mismatched_windows_rejected() {
        let model = tiny_model(5);
        let store = model.init_params(8).unwrap();
        let session = session_with_lengths(&[8, 10, 6], 3);
        let teacher = build_context_window(&session, 1, 1, 1).unwrap();
        let wrong_past = build_context_window(&session, 1, 0, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 10, labels: vec![1] }];
        let err = dual_mode_loss(
            &model,
            &store,
            &teacher,
            &wrong_past,
            &segments,
            0.0,
            DistillMode::Full,
        )
        .unwrap_err();
        assert!(err.to_string().contains("window mismatch"));
    }

    #[test]
    fn single_mode_loss_gradients_match_finite_differences() {
        let model = tiny_model(4);
        let store = model.init_params(11).unwrap();
        let session = session_with_lengths(&[4, 5], 3);
        let window = build_context_window(&session, 1, 1, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 4, labels: vec![1, 3] }];
        for mode in [Mode::Streaming, Mode::Nonstreaming] {
            let worst = crate::check::gradient_check(&store, |tape| {
                single_mode_loss_nodes(&model, tape, &window, &segments, mode)
            })
            .unwrap();
            assert!(worst <= crate::check::GRAD_TOLERANCE, "{mode}: worst rel err {worst:e}");
        }
    }

    #[test]
    fn dual_loss_gradients_match_finite_differences() {
        let model = tiny_model(4);
        let store = model.init_params(9).unwrap();
        assert!(store.total_values() <= 5000, "gradcheck model must stay tiny");
        let session = session_with_lengths(&[4, 5], 3);
        let teacher = build_context_window(&session, 1, 1, 1).unwrap();
        let student = build_context_window(&session, 1, 1, 0).unwrap();
        let segments = vec![Segment { start: 0, end: 4, labels: vec![1, 3] }];
        let worst = crate::check::dual_loss_gradient_check(
            &model,
            &store,
            &teacher,
            &student,
            &segments,
            5e-2,
            DistillMode::Collapsed3,
        )
        .unwrap();
        assert!(worst <= crate::check::GRAD_TOLERANCE, "worst rel err {worst:e}");
    }
}
