//! Verification oracles: central finite differences against the tape's
//! reverse pass, and the exhaustive-path sweep against the lattice DP.
//!
//! Both oracles use only forward evaluation, so they stay independent of
//! the code paths they check. They back the `gradcheck` and `oracle-check`
//! CLI commands as well as the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{evaluate_with_gradients, NodeId, Tape};
use crate::context::{segment_encoder_range, ContextWindow, Segment};
use crate::error::Result;
use crate::lattice::{self, DistillMode, LatticeTensor};
use crate::network::{Mode, Model};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-9;
const FD_STEP: f64 = 1e-4;

/// Relative disagreement with a floor so near-zero gradients compare on an
/// absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Central finite differences of a scalar expression over every parameter
/// entry, compared against the tape gradients. Returns the worst relative
/// error seen.
pub fn gradient_check<F>(store: &ParameterStore, build: F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let (_, analytic) = evaluate_with_gradients(store, &build)?;
    let mut probe = store.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let numel = store.get(name)?.numel();
        for i in 0..numel {
            let original = probe.get(name)?.data()[i];
            probe.tensor_mut(name)?.data_mut()[i] = original + FD_STEP;
            let plus = forward_only(&probe, &build)?;
            probe.tensor_mut(name)?.data_mut()[i] = original - FD_STEP;
            let minus = forward_only(&probe, &build)?;
            probe.tensor_mut(name)?.data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let an = analytic.get(name).map(|t| t.data()[i]).unwrap_or(0.0);
            worst = worst.max(relative_error(an, fd));
        }
    }
    Ok(worst)
}

fn forward_only<F>(store: &ParameterStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Tape) -> Result<NodeId>,
{
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    Ok(tape.value(loss).data()[0])
}

/// A small expression exercising every tape primitive at least once,
/// reduced to one scalar. Used by `gradcheck`.
pub fn primitive_zoo(seed: u64) -> Result<(ParameterStore, impl Fn(&mut Tape) -> Result<NodeId>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let tensor = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-0.8..0.8)).collect();
        Tensor::new(shape, data).unwrap()
    };
    store.insert("a", tensor(vec![3, 4], &mut rng))?;
    store.insert("b", tensor(vec![4, 3], &mut rng))?;
    store.insert("c", tensor(vec![3, 3], &mut rng))?;
    store.insert("bias", tensor(vec![3], &mut rng))?;
    store.insert("gain", tensor(vec![3], &mut rng))?;
    store.insert("table", tensor(vec![5, 3], &mut rng))?;
    store.insert("kernel", tensor(vec![3, 3], &mut rng))?;
    store.insert("frames", tensor(vec![5, 3], &mut rng))?;

    let x_data = tensor(vec![3, 4], &mut rng);

    let build = move |tape: &mut Tape| -> Result<NodeId> {
        let a = tape.param("a")?;
        let b = tape.param("b")?;
        let c = tape.param("c")?;
        let bias = tape.param("bias")?;
        let gain = tape.param("gain")?;
        let table = tape.param("table")?;
        let kernel = tape.param("kernel")?;
        let frames = tape.param("frames")?;
        let x = tape.input(x_data.clone())?;

        let prod = tape.matmul(a, b)?; // 3x3
        let scored = tape.matmul_transpose_b(a, x)?; // 3x3
        let mask = std::rc::Rc::new(
            (0..9).map(|i| (i / 3) >= (i % 3)).collect::<Vec<bool>>(),
        );
        let attn = tape.softmax_rows(scored, Some(mask))?;
        let mixed = tape.matmul(attn, c)?;
        let summed = tape.add(prod, mixed)?;
        let biased = tape.add_bias_row(summed, bias)?;
        let squashed = tape.tanh(biased)?;
        let gated = tape.sigmoid(squashed)?;
        let rectified = tape.relu(gated)?;
        let scaled = tape.scale(rectified, 1.25)?;
        let prodded = tape.mul(scaled, squashed)?;
        let normed = tape.layer_norm_rows(prodded, gain, bias)?;
        let gathered = tape.gather_rows(table, &[0, 2, 4])?;
        let combined = tape.add(normed, gathered)?;
        let lsm = tape.log_softmax_rows(combined)?;
        let lse = tape.logsumexp_rows(combined)?;
        let outer = tape.outer_add_rows(lse, lse)?; // 9x1
        let head = tape.slice_rows(outer, 0, 4)?;
        let stacked = tape.stack_frames(frames, 2)?; // 3x6
        let left = tape.slice_cols(stacked, 0, 3)?;
        let conv = tape.depthwise_conv(frames, kernel, true)?;
        let conv2 = tape.depthwise_conv(frames, kernel, false)?;
        let conv_sum = tape.add(conv, conv2)?;
        let glued = tape.concat_rows(&[left, conv_sum, lsm])?;
        let tail = tape.sum_all(glued)?;
        let head_sum = tape.sum_all(head)?;
        tape.add(tail, head_sum)
    };
    Ok((store, build))
}

/// Finite-difference check of a randomly initialized three-layer network
/// (matmul / bias / tanh / layer norm / log-softmax stack).
pub fn mlp_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let dims = [4usize, 6, 5, 3];
    for layer in 0..3 {
        let (m, n) = (dims[layer], dims[layer + 1]);
        let w: Vec<f64> = (0..m * n).map(|_| rng.random_range(-0.7..0.7)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.2)).collect();
        store.insert(&format!("w{layer}"), Tensor::new(vec![m, n], w)?)?;
        store.insert(&format!("b{layer}"), Tensor::new(vec![n], b)?)?;
    }
    store.insert("ln.gain", Tensor::new(vec![3], vec![1.0, 0.9, 1.1])?)?;
    store.insert("ln.bias", Tensor::new(vec![3], vec![0.0, 0.1, -0.1])?)?;
    let x = Tensor::new(
        vec![2, 4],
        (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    gradient_check(&store, move |tape| {
        let mut h = tape.input(x.clone())?;
        for layer in 0..3 {
            let w = tape.param(&format!("w{layer}"))?;
            let b = tape.param(&format!("b{layer}"))?;
            h = tape.matmul(h, w)?;
            h = tape.add_bias_row(h, b)?;
            if layer < 2 {
                h = tape.tanh(h)?;
            }
        }
        let gain = tape.param("ln.gain")?;
        let bias = tape.param("ln.bias")?;
        let normed = tape.layer_norm_rows(h, gain, bias)?;
        let lsm = tape.log_softmax_rows(normed)?;
        tape.sum_all(lsm)
    })
}

/// Finite-difference check of the dual-mode loss gradient.
///
/// The distillation term trains the student against a constant target, so
/// its gradient does not flow into the teacher distribution. The oracle
/// must differentiate the same function: the teacher logits inside the KL
/// are captured once at the current parameters and re-fed as constants
/// while the finite differences perturb everything else (the teacher's own
/// transducer loss stays live).
pub fn dual_loss_gradient_check(
    model: &Model,
    store: &ParameterStore,
    teacher_window: &ContextWindow,
    student_window: &ContextWindow,
    segments: &[Segment],
    beta: f64,
    mode: DistillMode,
) -> Result<f64> {
    let d = model.config().encoder.downsample_factor;
    let frozen: Vec<Tensor> = {
        let mut tape = Tape::new(store);
        let enc = model.encoder_nodes_at(
            &mut tape,
            &teacher_window.features,
            Mode::Nonstreaming,
            teacher_window.current_offset,
        )?;
        let mut out = Vec::with_capacity(segments.len());
        for segment in segments {
            let (lo, hi) = segment_encoder_range(teacher_window, segment, d)?;
            let t_seg = tape.slice_rows(enc, lo, hi - lo + 1)?;
            let pred = model.predictor_nodes(&mut tape, &segment.labels)?;
            let logits = model.joint_nodes(&mut tape, t_seg, pred)?;
            out.push(tape.value(logits).clone());
        }
        out
    };

    gradient_check(store, move |tape| {
        let t_enc = tape_encoder(model, tape, teacher_window, Mode::Nonstreaming)?;
        let s_enc = tape_encoder(model, tape, student_window, Mode::Streaming)?;
        let mut total: Option<NodeId> = None;
        for (segment, frozen_logits) in segments.iter().zip(&frozen) {
            let (lo, hi) = segment_encoder_range(student_window, segment, d)?;
            let frames = hi - lo + 1;
            let t_seg = tape.slice_rows(t_enc, lo, frames)?;
            let s_seg = tape.slice_rows(s_enc, lo, frames)?;
            let pred = model.predictor_nodes(tape, &segment.labels)?;
            let t_logits = model.joint_nodes(tape, t_seg, pred)?;
            let s_logits = model.joint_nodes(tape, s_seg, pred)?;
            let t_loss = tape.rnnt_loss(t_logits, &segment.labels, frames)?;
            let s_loss = tape.rnnt_loss(s_logits, &segment.labels, frames)?;
            let target = tape.input(frozen_logits.clone())?;
            let kl = tape.lattice_distillation(target, s_logits, &segment.labels, frames, mode)?;
            let weighted = tape.scale(kl, beta)?;
            let pair = tape.add(t_loss, s_loss)?;
            let seg_total = tape.add(pair, weighted)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, seg_total)?,
                None => seg_total,
            });
        }
        total.ok_or_else(|| crate::error::Error::usage("no segments".to_string()))
    })
}

fn tape_encoder(
    model: &Model,
    tape: &mut Tape,
    window: &ContextWindow,
    mode: Mode,
) -> Result<NodeId> {
    model.encoder_nodes_at(tape, &window.features, mode, window.current_offset)
}

/// One trial of the lattice oracle sweep: returns |DP - exhaustive|.
pub fn oracle_trial(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = rng.random_range(1..=6);
    let num_labels = rng.random_range(0..=4);
    let vocab = rng.random_range(2..=5);
    let lat = random_lattice(&mut rng, frames, num_labels, vocab);
    let (dp, _) = lattice::rnnt_loss(&lat)?;
    let brute = lattice::rnnt_loss_bruteforce(&lat)?;
    Ok((dp - brute).abs())
}

/// Random lattice with log-softmax-normalized nodes.
pub fn random_lattice(
    rng: &mut impl Rng,
    frames: usize,
    num_labels: usize,
    vocab: usize,
) -> LatticeTensor {
    let positions = num_labels + 1;
    let mut log_probs = vec![0.0; frames * positions * vocab];
    for node in 0..frames * positions {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.5..2.5)).collect();
        crate::tensor::log_softmax_into(
            &logits,
            &mut log_probs[node * vocab..(node + 1) * vocab],
        );
    }
    let labels = (0..num_labels).map(|_| rng.random_range(1..vocab)).collect();
    LatticeTensor::new(log_probs, frames, labels, vocab).unwrap()
}

/// Run `trials` independent oracle trials (parallel when enabled) and
/// return the worst disagreement.
pub fn oracle_sweep(trials: usize, base_seed: u64) -> Result<f64> {
    let diffs = crate::par::map_range(trials, |i| oracle_trial(base_seed.wrapping_add(i as u64)));
    let mut worst = 0.0f64;
    for d in diffs {
        worst = worst.max(d?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_passes_finite_difference_check() {
        let (store, build) = primitive_zoo(7).unwrap();
        let worst = gradient_check(&store, build).unwrap();
        assert!(worst <= GRAD_TOLERANCE, "worst relative error {worst:e}");
    }

    #[test]
    fn three_layer_network_gradients_agree() {
        let worst = mlp_check(123).unwrap();
        assert!(worst <= GRAD_TOLERANCE, "worst relative error {worst:e}");
    }

    #[test]
    fn oracle_sweep_small() {
        let worst = oracle_sweep(25, 900).unwrap();
        assert!(worst <= ORACLE_TOLERANCE, "worst |dp - brute| {worst:e}");
    }

    #[test]
    fn same_seed_same_graph_bitwise() {
        let (store_a, build_a) = primitive_zoo(99).unwrap();
        let (store_b, build_b) = primitive_zoo(99).unwrap();
        let (va, ga) = evaluate_with_gradients(&store_a, build_a).unwrap();
        let (vb, gb) = evaluate_with_gradients(&store_b, build_b).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());
        for ((na, ta), (nb, tb)) in ga.iter().zip(gb.iter()) {
            assert_eq!(na, nb);
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
