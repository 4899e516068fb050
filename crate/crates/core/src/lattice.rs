//! Transducer output-lattice mathematics.
//!
//! A lattice node (t, u) holds a log-distribution over the vocabulary; the
//! blank symbol sits at index 0 and advances time, a label emission advances
//! the label position. The loss is the negative log-probability of the label
//! sequence, summed over every monotonic path from (0, 0) through the final
//! blank at (T-1, U).
//!
//! Everything runs in log space with a negative-infinity sentinel for
//! out-of-range terms; there is no probability-space fallback. Two
//! independent routes to the loss are kept side by side: the forward
//! (alpha) recursion and an exhaustive path enumeration used as an oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logsumexp2, Tensor};

pub const BLANK: usize = 0;

/// Distribution floor used by the collapsed distillation mode when a group
/// carries no mass.
const KL_EPS: f64 = 1e-12;

/// Guard for the exhaustive oracle: number of monotonic paths must stay
/// enumerable on a desk machine.
pub const BRUTE_FORCE_PATH_LIMIT: f64 = 1e6;

/// Per-segment joint log-probabilities of shape (T, U+1, V) plus the label
/// sequence (no blanks, ids in [1, V-1]).
#[derive(Debug, Clone)]
pub struct LatticeTensor {
    log_probs: Vec<f64>,
    frames: usize,
    labels: Vec<usize>,
    vocab: usize,
}

/// Log-space forward/backward tables over the (T, U+1) node grid.
#[derive(Debug, Clone)]
pub struct AlphaBetaTables {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub frames: usize,
    pub positions: usize,
}

impl AlphaBetaTables {
    pub fn alpha_at(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.positions + u]
    }

    pub fn beta_at(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.positions + u]
    }

    /// Total log-probability of the label sequence.
    pub fn log_likelihood(&self) -> f64 {
        self.beta[0]
    }
}

/// Which form of the lattice KL coupling to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// KL over all V symbols at every node.
    Full,
    /// Each node's distribution collapsed to {next label, blank, remainder}
    /// before the KL; the final row collapses to {blank, remainder}.
    #[default]
    Collapsed3,
}

impl LatticeTensor {
    /// Build from already-normalized log-probabilities.
    pub fn new(log_probs: Vec<f64>, frames: usize, labels: Vec<usize>, vocab: usize) -> Result<Self> {
        let positions = labels.len() + 1;
        if frames == 0 {
            return Err(Error::usage("lattice needs at least one frame".to_string()));
        }
        if log_probs.len() != frames * positions * vocab {
            return Err(Error::usage(format!(
                "lattice data length {} does not match {frames}x{positions}x{vocab}",
                log_probs.len()
            )));
        }
        let lat = LatticeTensor { log_probs, frames, labels, vocab };
        lat.check_labels()?;
        Ok(lat)
    }

    /// Build by log-softmaxing rows of pre-softmax logits laid out as
    /// (frames * (labels+1)) x vocab.
    pub fn from_logits(logits: &Tensor, labels: &[usize], frames: usize) -> Result<Self> {
        let positions = labels.len() + 1;
        let vocab = logits.cols();
        if logits.rows() != frames * positions {
            return Err(Error::usage(format!(
                "logit rows {} do not match {frames} frames x {positions} positions",
                logits.rows()
            )));
        }
        let mut log_probs = vec![0.0; logits.numel()];
        for i in 0..logits.rows() {
            crate::tensor::log_softmax_into(
                logits.row(i),
                &mut log_probs[i * vocab..(i + 1) * vocab],
            );
        }
        let lat = LatticeTensor { log_probs, frames, labels: labels.to_vec(), vocab };
        lat.check_labels()?;
        Ok(lat)
    }

    fn check_labels(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::usage("vocabulary must include blank and one label".to_string()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y == BLANK || y >= self.vocab) {
            return Err(Error::usage(format!(
                "label id {bad} outside [1, {})",
                self.vocab
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// log P(symbol k | node (t, u)).
    pub fn log_prob(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_probs[(t * (self.labels.len() + 1) + u) * self.vocab + k]
    }

    fn log_blank(&self, t: usize, u: usize) -> f64 {
        self.log_prob(t, u, BLANK)
    }

    /// log-probability of emitting the next label out of position u.
    fn log_emit(&self, t: usize, u: usize) -> f64 {
        self.log_prob(t, u, self.labels[u])
    }

    /// Verify that every node is a valid log-distribution (logsumexp 0
    /// within `tol`).
    pub fn validate_distributions(&self, tol: f64) -> Result<()> {
        let positions = self.labels.len() + 1;
        for t in 0..self.frames {
            for u in 0..positions {
                let base = (t * positions + u) * self.vocab;
                let lse =
                    crate::tensor::logsumexp(&self.log_probs[base..base + self.vocab])?;
                if lse.abs() > tol {
                    return Err(Error::usage(format!(
                        "node ({t},{u}) is not normalized: logsumexp {lse:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of monotonic paths through a T x (U+1) lattice: C(T-1+U, U).
pub fn path_count(frames: usize, num_labels: usize) -> f64 {
    let mut c = 1.0f64;
    for i in 0..num_labels {
        c = c * (frames - 1 + num_labels - i) as f64 / (num_labels - i) as f64;
    }
    c
}

/// Transducer loss by the forward recursion, with both DP tables.
///
/// alpha(0,0) = 0 and
/// alpha(t,u) = lse(alpha(t-1,u) + blank(t-1,u), alpha(t,u-1) + emit(t,u-1)),
/// out-of-range terms being negative infinity. The loss is
/// -(alpha(T-1,U) + blank(T-1,U)).
pub fn rnnt_loss(lattice: &LatticeTensor) -> Result<(f64, AlphaBetaTables)> {
    let t_len = lattice.frames;
    let u_len = lattice.num_labels();
    let positions = u_len + 1;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * positions];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..positions {
            if t == 0 && u == 0 {
                continue;
            }
            let from_blank = if t > 0 {
                alpha[(t - 1) * positions + u] + lattice.log_blank(t - 1, u)
            } else {
                f64::NEG_INFINITY
            };
            let from_emit = if u > 0 {
                alpha[t * positions + u - 1] + lattice.log_emit(t, u - 1)
            } else {
                f64::NEG_INFINITY
            };
            alpha[t * positions + u] = logsumexp2(from_blank, from_emit);
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; t_len * positions];
    beta[(t_len - 1) * positions + u_len] = lattice.log_blank(t_len - 1, u_len);
    for t in (0..t_len).rev() {
        for u in (0..positions).rev() {
            if t == t_len - 1 && u == u_len {
                continue;
            }
            let via_blank = if t + 1 < t_len {
                beta[(t + 1) * positions + u] + lattice.log_blank(t, u)
            } else {
                f64::NEG_INFINITY
            };
            let via_emit = if u < u_len {
                beta[t * positions + u + 1] + lattice.log_emit(t, u)
            } else {
                f64::NEG_INFINITY
            };
            beta[t * positions + u] = logsumexp2(via_blank, via_emit);
        }
    }

    let log_like = alpha[(t_len - 1) * positions + u_len] + lattice.log_blank(t_len - 1, u_len);
    let tables = AlphaBetaTables { alpha, beta, frames: t_len, positions };
    Ok((-log_like, tables))
}

/// Exhaustive-path oracle for the transducer loss.
///
/// Enumerates every monotonic path explicitly and sums their probabilities
/// in log space. Refuses when C(T-1+U, U) exceeds
/// [`BRUTE_FORCE_PATH_LIMIT`].
pub fn rnnt_loss_bruteforce(lattice: &LatticeTensor) -> Result<f64> {
    let paths = path_count(lattice.frames, lattice.num_labels());
    if paths > BRUTE_FORCE_PATH_LIMIT {
        return Err(Error::usage(format!(
            "path count {paths:.0} exceeds the {BRUTE_FORCE_PATH_LIMIT:.0} oracle bound"
        )));
    }
    let mut terms = Vec::new();
    enumerate_paths(lattice, 0, 0, 0.0, &mut terms);
    let total = crate::tensor::logsumexp(&terms)?;
    Ok(-total)
}

fn enumerate_paths(lat: &LatticeTensor, t: usize, u: usize, acc: f64, terms: &mut Vec<f64>) {
    let u_len = lat.num_labels();
    if t == lat.frames - 1 && u == u_len {
        terms.push(acc + lat.log_blank(t, u));
        return;
    }
    if t + 1 < lat.frames {
        enumerate_paths(lat, t + 1, u, acc + lat.log_blank(t, u), terms);
    }
    if u < u_len {
        enumerate_paths(lat, t, u + 1, acc + lat.log_emit(t, u), terms);
    }
}

/// Number of paths the oracle would enumerate (for tests and reporting).
pub fn bruteforce_path_count(lattice: &LatticeTensor) -> Result<usize> {
    let paths = path_count(lattice.frames, lattice.num_labels());
    if paths > BRUTE_FORCE_PATH_LIMIT {
        return Err(Error::usage(format!(
            "path count {paths:.0} exceeds the {BRUTE_FORCE_PATH_LIMIT:.0} oracle bound"
        )));
    }
    let mut terms = Vec::new();
    enumerate_paths(lattice, 0, 0, 0.0, &mut terms);
    Ok(terms.len())
}

/// Gradient of the transducer loss with respect to the pre-softmax logits,
/// shaped like the lattice (T * (U+1)) x V.
///
/// Derivation: with g(t,u,k) = dLoss/d logP(k|t,u) given by arc occupancies,
/// the chain rule through the row softmax gives
/// dLoss/dz(t,u,k) = g(t,u,k) - p(t,u,k) * sum_j g(t,u,j), which sums to
/// zero over the vocabulary at every node.
pub fn rnnt_grad(lattice: &LatticeTensor) -> Result<Tensor> {
    let (_, tables) = rnnt_loss(lattice)?;
    let t_len = lattice.frames;
    let u_len = lattice.num_labels();
    let positions = u_len + 1;
    let v = lattice.vocab;
    let log_z = tables.log_likelihood();

    let mut grad = vec![0.0; t_len * positions * v];
    for t in 0..t_len {
        for u in 0..positions {
            let alpha = tables.alpha_at(t, u);
            if alpha == f64::NEG_INFINITY {
                continue;
            }
            let base = (t * positions + u) * v;
            // dLoss/d logP for the two arcs leaving this node.
            let mut g = vec![0.0; v];
            let blank_suffix = if t + 1 < t_len {
                tables.beta_at(t + 1, u)
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            if blank_suffix > f64::NEG_INFINITY {
                g[BLANK] = -(alpha + lattice.log_blank(t, u) + blank_suffix - log_z).exp();
            }
            if u < u_len {
                let emit_suffix = tables.beta_at(t, u + 1);
                if emit_suffix > f64::NEG_INFINITY {
                    g[lattice.labels[u]] =
                        -(alpha + lattice.log_emit(t, u) + emit_suffix - log_z).exp();
                }
            }
            let g_sum: f64 = g.iter().sum();
            for k in 0..v {
                let p = lattice.log_prob(t, u, k).exp();
                grad[base + k] = g[k] - p * g_sum;
            }
        }
    }
    Tensor::new(vec![t_len * positions, v], grad)
}

/// Sum over lattice nodes of KL(teacher || student).
///
/// `Full` uses all V symbols; `Collapsed3` first collapses each node to
/// {next label, blank, remainder mass} (the final row has no next label).
/// The teacher is a constant for gradient purposes.
pub fn lattice_distillation(
    teacher: &LatticeTensor,
    student: &LatticeTensor,
    mode: DistillMode,
) -> Result<f64> {
    check_pair(teacher, student)?;
    let positions = teacher.num_labels() + 1;
    let mut total = 0.0;
    for t in 0..teacher.frames {
        for u in 0..positions {
            total += match mode {
                DistillMode::Full => node_kl_full(teacher, student, t, u),
                DistillMode::Collapsed3 => node_kl_collapsed(teacher, student, t, u),
            };
        }
    }
    Ok(total)
}

/// Gradient of [`lattice_distillation`] with respect to the student's
/// pre-softmax logits; the teacher side receives none.
pub fn distillation_grad_student(
    teacher: &LatticeTensor,
    student: &LatticeTensor,
    mode: DistillMode,
) -> Result<Tensor> {
    check_pair(teacher, student)?;
    let positions = teacher.num_labels() + 1;
    let v = teacher.vocab;
    let mut grad = vec![0.0; teacher.frames * positions * v];
    for t in 0..teacher.frames {
        for u in 0..positions {
            let base = (t * positions + u) * v;
            // dKL/d p_student(j), then through the softmax.
            let coeff = match mode {
                DistillMode::Full => {
                    let mut c = vec![0.0; v];
                    for (k, ck) in c.iter_mut().enumerate() {
                        let tp = teacher.log_prob(t, u, k).exp();
                        if tp > 0.0 {
                            *ck = -tp / student.log_prob(t, u, k).exp().max(KL_EPS);
                        }
                    }
                    c
                }
                DistillMode::Collapsed3 => {
                    let groups = node_groups(teacher, t, u);
                    let mut c = vec![0.0; v];
                    for (members, _) in &groups {
                        let tg: f64 =
                            members.iter().map(|&k| teacher.log_prob(t, u, k).exp()).sum();
                        if tg <= 0.0 {
                            continue;
                        }
                        let sg: f64 =
                            members.iter().map(|&k| student.log_prob(t, u, k).exp()).sum();
                        let cg = -tg / sg.max(KL_EPS);
                        for &k in members {
                            c[k] = cg;
                        }
                    }
                    c
                }
            };
            let mut dot = 0.0;
            let mut probs = vec![0.0; v];
            for k in 0..v {
                probs[k] = student.log_prob(t, u, k).exp();
                dot += coeff[k] * probs[k];
            }
            for k in 0..v {
                grad[base + k] = probs[k] * (coeff[k] - dot);
            }
        }
    }
    Tensor::new(vec![teacher.frames * positions, v], grad)
}

fn check_pair(teacher: &LatticeTensor, student: &LatticeTensor) -> Result<()> {
    if teacher.frames != student.frames || teacher.vocab != student.vocab {
        return Err(Error::usage(format!(
            "lattice shape mismatch: {}x{} vs {}x{}",
            teacher.frames, teacher.vocab, student.frames, student.vocab
        )));
    }
    if teacher.labels != student.labels {
        return Err(Error::usage("lattice label sequences differ".to_string()));
    }
    Ok(())
}

fn node_kl_full(teacher: &LatticeTensor, student: &LatticeTensor, t: usize, u: usize) -> f64 {
    let mut kl = 0.0;
    for k in 0..teacher.vocab {
        let lt = teacher.log_prob(t, u, k);
        let p = lt.exp();
        if p > 0.0 {
            kl += p * (lt - student.log_prob(t, u, k));
        }
    }
    kl
}

/// Symbol groups for the collapsed distribution at node (t, u):
/// next label (absent on the final row), blank, and the remainder.
fn node_groups(lat: &LatticeTensor, _t: usize, u: usize) -> Vec<(Vec<usize>, &'static str)> {
    let v = lat.vocab;
    let next = if u < lat.num_labels() { Some(lat.labels[u]) } else { None };
    let mut groups = Vec::with_capacity(3);
    if let Some(y) = next {
        groups.push((vec![y], "label"));
    }
    groups.push((vec![BLANK], "blank"));
    let rest: Vec<usize> =
        (0..v).filter(|&k| k != BLANK && Some(k) != next).collect();
    if !rest.is_empty() {
        groups.push((rest, "remainder"));
    }
    groups
}

fn node_kl_collapsed(teacher: &LatticeTensor, student: &LatticeTensor, t: usize, u: usize) -> f64 {
    let mut kl = 0.0;
    for (members, _) in node_groups(teacher, t, u) {
        let tg: f64 = members.iter().map(|&k| teacher.log_prob(t, u, k).exp()).sum();
        if tg <= 0.0 {
            continue;
        }
        let sg: f64 = members.iter().map(|&k| student.log_prob(t, u, k).exp()).sum();
        kl += tg * (tg.max(KL_EPS).ln() - sg.max(KL_EPS).ln());
    }
    kl
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub fn uniform_lattice(frames: usize, labels: Vec<usize>, vocab: usize) -> LatticeTensor {
        let positions = labels.len() + 1;
        let lp = -(vocab as f64).ln();
        LatticeTensor::new(vec![lp; frames * positions * vocab], frames, labels, vocab).unwrap()
    }

    pub fn random_lattice(
        rng: &mut impl rand::Rng,
        frames: usize,
        num_labels: usize,
        vocab: usize,
    ) -> LatticeTensor {
        let positions = num_labels + 1;
        let mut log_probs = vec![0.0; frames * positions * vocab];
        for node in 0..frames * positions {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
            crate::tensor::log_softmax_into(
                &logits,
                &mut log_probs[node * vocab..(node + 1) * vocab],
            );
        }
        let labels = (0..num_labels).map(|_| rng.random_range(1..vocab)).collect();
        LatticeTensor::new(log_probs, frames, labels, vocab).unwrap()
    }

    #[test]
    fn single_frame_single_label_uniform() {
        let lat = uniform_lattice(1, vec![1], 3);
        let (loss, _) = rnnt_loss(&lat).unwrap();
        assert!((loss - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_uniform() {
        let lat = uniform_lattice(2, vec![2], 3);
        let (loss, _) = rnnt_loss(&lat).unwrap();
        assert!((loss - (27.0f64 / 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_label_sequence_all_blank() {
        let lat = uniform_lattice(3, vec![], 3);
        let (loss, _) = rnnt_loss(&lat).unwrap();
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_enumerates_expected_path_counts() {
        assert_eq!(bruteforce_path_count(&uniform_lattice(2, vec![1], 3)).unwrap(), 2);
        assert_eq!(bruteforce_path_count(&uniform_lattice(4, vec![1, 2], 3)).unwrap(), 10);
        assert_eq!(path_count(4, 2), 10.0);
    }

    #[test]
    fn empty_labels_single_path_closed_form() {
        let mut rng = seeded(7);
        let lat = random_lattice(&mut rng, 5, 0, 4);
        let direct: f64 = (0..5).map(|t| lat.log_prob(t, 0, BLANK)).sum();
        let brute = rnnt_loss_bruteforce(&lat).unwrap();
        assert!((brute + direct).abs() < 1e-12);
        assert_eq!(bruteforce_path_count(&lat).unwrap(), 1);
    }

    #[test]
    fn oracle_guard_names_the_bound() {
        let lat = uniform_lattice(500, (0..500).map(|_| 1).collect(), 3);
        let err = rnnt_loss_bruteforce(&lat).unwrap_err();
        assert!(err.to_string().contains("1000000"));
    }

    fn seeded(seed: u64) -> impl rand::Rng {
        use rand::SeedableRng;
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dp_matches_bruteforce_on_random_sweep() {
        let mut rng = seeded(42);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let frames = rng.random_range(1..=5);
            let labels = rng.random_range(0..=3);
            let vocab = rng.random_range(2..=4);
            let lat = random_lattice(&mut rng, frames, labels, vocab);
            let (dp, tables) = rnnt_loss(&lat).unwrap();
            let brute = rnnt_loss_bruteforce(&lat).unwrap();
            worst = worst.max((dp - brute).abs());
            // forward total equals backward total
            let fwd = tables.alpha_at(frames - 1, labels) + lat.log_blank(frames - 1, labels);
            assert!((fwd - tables.log_likelihood()).abs() < 1e-9);
            assert!(dp >= 0.0);
        }
        assert!(worst <= 1e-9, "max |dp - brute| = {worst:e}");
    }

    #[test]
    fn label_out_of_vocabulary_rejected() {
        let lp = vec![-(3f64).ln(); 2 * 3];
        assert!(LatticeTensor::new(lp.clone(), 1, vec![3], 3).is_err());
        assert!(LatticeTensor::new(lp, 1, vec![0], 3).is_err());
    }

    #[test]
    fn grad_sums_to_zero_per_node() {
        let mut rng = seeded(11);
        let lat = random_lattice(&mut rng, 4, 2, 4);
        let grad = rnnt_grad(&lat).unwrap();
        for i in 0..grad.rows() {
            let s: f64 = grad.row(i).iter().sum();
            assert!(s.abs() <= 1e-10, "node {i} sums to {s:e}");
        }
    }

    #[test]
    fn grad_single_path_uniform_analytic() {
        let lat = uniform_lattice(1, vec![1], 3);
        let grad = rnnt_grad(&lat).unwrap();
        // Node (0,0): -2/3 on the label coordinate, +1/3 elsewhere.
        let row = grad.row(0);
        assert!((row[1] + 2.0 / 3.0).abs() < 1e-12);
        assert!((row[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((row[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn grad_matches_finite_differences_on_logits() {
        let mut rng = seeded(3);
        for _ in 0..5 {
            let frames = rng.random_range(1..=4);
            let num_labels = rng.random_range(0..=2);
            let vocab = rng.random_range(2..=4);
            let positions = num_labels + 1;
            let logits_data: Vec<f64> =
                (0..frames * positions * vocab).map(|_| rng.random_range(-1.5..1.5)).collect();
            let labels: Vec<usize> =
                (0..num_labels).map(|_| rng.random_range(1..vocab)).collect();
            let logits = Tensor::new(vec![frames * positions, vocab], logits_data.clone()).unwrap();
            let lat = LatticeTensor::from_logits(&logits, &labels, frames).unwrap();
            let grad = rnnt_grad(&lat).unwrap();

            let h = 1e-5;
            for i in 0..logits_data.len() {
                let mut plus = logits_data.clone();
                plus[i] += h;
                let mut minus = logits_data.clone();
                minus[i] -= h;
                let lp = LatticeTensor::from_logits(
                    &Tensor::new(vec![frames * positions, vocab], plus).unwrap(),
                    &labels,
                    frames,
                )
                .unwrap();
                let lm = LatticeTensor::from_logits(
                    &Tensor::new(vec![frames * positions, vocab], minus).unwrap(),
                    &labels,
                    frames,
                )
                .unwrap();
                let fd = (rnnt_loss(&lp).unwrap().0 - rnnt_loss(&lm).unwrap().0) / (2.0 * h);
                let an = grad.data()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom <= 1e-4,
                    "logit {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn distillation_zero_when_identical() {
        let mut rng = seeded(9);
        let lat = random_lattice(&mut rng, 3, 2, 4);
        assert_eq!(lattice_distillation(&lat, &lat, DistillMode::Full).unwrap(), 0.0);
        assert_eq!(lattice_distillation(&lat, &lat, DistillMode::Collapsed3).unwrap(), 0.0);
    }

    #[test]
    fn distillation_single_node_known_value() {
        // teacher (0.5, 0.25, 0.25) vs uniform student over 3 symbols
        let teacher = LatticeTensor::new(
            vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()],
            1,
            vec![],
            3,
        )
        .unwrap();
        let student = LatticeTensor::new(vec![-(3f64.ln()); 3], 1, vec![], 3).unwrap();
        let kl = lattice_distillation(&teacher, &student, DistillMode::Full).unwrap();
        let expected = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
        assert!((kl - expected).abs() < 1e-10);
        assert!((kl - 0.05889).abs() < 5e-5);
    }

    #[test]
    fn collapsed_equals_full_with_binary_vocab() {
        let mut rng = seeded(21);
        for _ in 0..20 {
            let frames = rng.random_range(1..=4);
            let labels = rng.random_range(0..=3);
            let teacher = random_lattice(&mut rng, frames, labels, 2);
            let mut student = random_lattice(&mut rng, frames, labels, 2);
            student.labels = teacher.labels.clone();
            let full = lattice_distillation(&teacher, &student, DistillMode::Full).unwrap();
            let collapsed =
                lattice_distillation(&teacher, &student, DistillMode::Collapsed3).unwrap();
            assert!((full - collapsed).abs() < 1e-10);
            assert!(full >= 0.0);
        }
    }

    #[test]
    fn distillation_shape_and_label_mismatch() {
        let a = uniform_lattice(2, vec![1], 3);
        let b = uniform_lattice(3, vec![1], 3);
        assert!(lattice_distillation(&a, &b, DistillMode::Full).is_err());
        let c = uniform_lattice(2, vec![2], 3);
        assert!(lattice_distillation(&a, &c, DistillMode::Full).is_err());
    }

    #[test]
    fn distillation_grad_matches_finite_differences() {
        let mut rng = seeded(5);
        for mode in [DistillMode::Full, DistillMode::Collapsed3] {
            let frames = 2;
            let labels = vec![1, 2];
            let vocab = 4;
            let positions = labels.len() + 1;
            let teacher = random_lattice(&mut rng, frames, labels.len(), vocab);
            let teacher = LatticeTensor { labels: labels.clone(), ..teacher };
            let student_logits: Vec<f64> =
                (0..frames * positions * vocab).map(|_| rng.random_range(-1.0..1.0)).collect();
            let to_lat = |data: &[f64]| {
                LatticeTensor::from_logits(
                    &Tensor::new(vec![frames * positions, vocab], data.to_vec()).unwrap(),
                    &labels,
                    frames,
                )
                .unwrap()
            };
            let student = to_lat(&student_logits);
            let grad = distillation_grad_student(&teacher, &student, mode).unwrap();
            let h = 1e-5;
            for i in 0..student_logits.len() {
                let mut plus = student_logits.clone();
                plus[i] += h;
                let mut minus = student_logits.clone();
                minus[i] -= h;
                let fp = lattice_distillation(&teacher, &to_lat(&plus), mode).unwrap();
                let fm = lattice_distillation(&teacher, &to_lat(&minus), mode).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let an = grad.data()[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / denom <= 1e-4, "{mode:?} logit {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn validate_distributions_catches_unnormalized() {
        let mut lat = uniform_lattice(1, vec![1], 3);
        lat.log_probs[0] = 0.5;
        assert!(lat.validate_distributions(1e-10).is_err());
    }
}
