//! The dual-mode transducer network.
//!
//! One [`ParameterStore`] backs both encoder modes; switching between
//! streaming (strictly causal) and non-streaming (full-context) attention is
//! purely a masking decision, never a weight copy.

mod checkpoint;
mod encoder;
mod joint;
mod predictor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainMeta, CHECKPOINT_SCHEMA};

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Which attention pattern the encoder runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Strictly causal: position t never sees inputs beyond t.
    Streaming,
    /// Full self-attention over the whole window.
    Nonstreaming,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Streaming => write!(f, "streaming"),
            Mode::Nonstreaming => write!(f, "nonstreaming"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "streaming" => Ok(Mode::Streaming),
            "nonstreaming" => Ok(Mode::Nonstreaming),
            other => Err(Error::usage(format!("unknown mode {other}"))),
        }
    }
}

/// Encoder topology. Desk-scaled defaults; block structure is
/// attention + optional depthwise convolution + feed-forward, each with a
/// pre-norm residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
    #[serde(default)]
    pub use_depthwise_conv: bool,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_downsample")]
    pub downsample_factor: usize,
}

fn default_conv_kernel() -> usize {
    3
}

fn default_downsample() -> usize {
    1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 4,
            model_dim: 64,
            num_heads: 4,
            feedforward_dim: 128,
            use_depthwise_conv: false,
            conv_kernel: 3,
            downsample_factor: 1,
        }
    }
}

/// Whole-model topology: encoder, prediction network, joint network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    /// Vocabulary size including the blank at index 0.
    pub vocab_size: usize,
    pub encoder: EncoderConfig,
    pub pred_dim: usize,
    pub joint_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 16,
            vocab_size: 13,
            encoder: EncoderConfig::default(),
            pred_dim: 32,
            joint_dim: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let enc = &self.encoder;
        if enc.model_dim == 0 || enc.num_heads == 0 || enc.model_dim % enc.num_heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                enc.model_dim, enc.num_heads
            )));
        }
        if enc.downsample_factor == 0 {
            return Err(Error::config("downsample_factor must be >= 1".to_string()));
        }
        if enc.use_depthwise_conv && enc.conv_kernel % 2 == 0 {
            return Err(Error::config("conv_kernel must be odd".to_string()));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must cover blank plus one label".to_string()));
        }
        if self.feature_dim == 0 || self.pred_dim == 0 || self.joint_dim == 0 {
            return Err(Error::config("zero-sized dimension".to_string()));
        }
        Ok(())
    }

    /// Encoder output length for a T-frame input.
    pub fn encoded_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.encoder.downsample_factor)
    }
}

/// The network: configuration plus graph builders. Weights always live in a
/// caller-owned [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Model { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameter store with uniform fan-in initialization, seeded.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let enc = &self.cfg.encoder;
        let md = enc.model_dim;
        let stacked_dim = self.cfg.feature_dim * enc.downsample_factor;

        init_matrix(&mut store, &mut rng, "enc.input.w", stacked_dim, md)?;
        init_bias(&mut store, "enc.input.b", md)?;
        for b in 0..enc.num_blocks {
            let p = format!("enc.block{b}");
            init_layer_norm(&mut store, &format!("{p}.attn.ln"), md)?;
            for w in ["wq", "wk", "wv", "wo"] {
                init_matrix(&mut store, &mut rng, &format!("{p}.attn.{w}"), md, md)?;
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                init_bias(&mut store, &format!("{p}.attn.{bias}"), md)?;
            }
            if enc.use_depthwise_conv {
                init_layer_norm(&mut store, &format!("{p}.conv.ln"), md)?;
                init_matrix(&mut store, &mut rng, &format!("{p}.conv.kernel"), enc.conv_kernel, md)?;
            }
            init_layer_norm(&mut store, &format!("{p}.ff.ln"), md)?;
            init_matrix(&mut store, &mut rng, &format!("{p}.ff.w1"), md, enc.feedforward_dim)?;
            init_bias(&mut store, &format!("{p}.ff.b1"), enc.feedforward_dim)?;
            init_matrix(&mut store, &mut rng, &format!("{p}.ff.w2"), enc.feedforward_dim, md)?;
            init_bias(&mut store, &format!("{p}.ff.b2"), md)?;
        }
        init_layer_norm(&mut store, "enc.final_ln", md)?;

        let pd = self.cfg.pred_dim;
        init_matrix(&mut store, &mut rng, "pred.embed", self.cfg.vocab_size, pd)?;
        // Learned start state instead of a zero special case.
        init_matrix(&mut store, &mut rng, "pred.h0", 1, pd)?;
        init_matrix(&mut store, &mut rng, "pred.c0", 1, pd)?;
        for gate in ["i", "f", "g", "o"] {
            init_matrix(&mut store, &mut rng, &format!("pred.wx{gate}"), pd, pd)?;
            init_matrix(&mut store, &mut rng, &format!("pred.wh{gate}"), pd, pd)?;
            init_bias(&mut store, &format!("pred.b{gate}"), pd)?;
        }
        // Positive forget bias keeps early cell state alive.
        for v in store.tensor_mut("pred.bf")?.data_mut() {
            *v = 1.0;
        }

        let jd = self.cfg.joint_dim;
        init_matrix(&mut store, &mut rng, "joint.enc_proj", md, jd)?;
        init_matrix(&mut store, &mut rng, "joint.pred_proj", pd, jd)?;
        init_bias(&mut store, "joint.b1", jd)?;
        init_matrix(&mut store, &mut rng, "joint.out", jd, self.cfg.vocab_size)?;
        init_bias(&mut store, "joint.b2", self.cfg.vocab_size)?;
        Ok(store)
    }

    /// Encoder graph over a T x feature_dim input; output node holds a
    /// ceil(T/downsample) x model_dim matrix. Positions are anchored at
    /// frame zero.
    pub fn encoder_nodes(&self, tape: &mut Tape, features: &Tensor, mode: Mode) -> Result<NodeId> {
        encoder::build(&self.cfg, tape, features, mode, 0)
    }

    /// Encoder graph with the positional origin at `position_base` (the
    /// first frame of the current utterance inside a context window).
    pub fn encoder_nodes_at(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        mode: Mode,
        position_base: usize,
    ) -> Result<NodeId> {
        encoder::build(&self.cfg, tape, features, mode, position_base)
    }

    /// Forward-only convenience wrapper around [`Self::encoder_nodes`].
    pub fn encode(&self, store: &ParameterStore, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let out = self.encoder_nodes(&mut tape, features, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Prediction-network graph: (prefix_len + 1) x pred_dim states, state 0
    /// being the learned start state.
    pub fn predictor_nodes(&self, tape: &mut Tape, prefix: &[usize]) -> Result<NodeId> {
        predictor::build(&self.cfg, tape, prefix)
    }

    pub fn predict(&self, store: &ParameterStore, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let out = self.predictor_nodes(&mut tape, prefix)?;
        Ok(tape.value(out).clone())
    }

    /// Incremental predictor state for decoding.
    pub fn predictor_start(&self, tape: &mut Tape) -> Result<predictor::PredState> {
        predictor::start(tape)
    }

    pub fn predictor_step(
        &self,
        tape: &mut Tape,
        state: &predictor::PredState,
        label: usize,
    ) -> Result<predictor::PredState> {
        predictor::step(&self.cfg, tape, state, label)
    }

    /// Joint-network logits for every (frame, label-position) pair:
    /// (T * (U+1)) x vocab.
    pub fn joint_nodes(&self, tape: &mut Tape, enc: NodeId, pred: NodeId) -> Result<NodeId> {
        joint::build(tape, enc, pred)
    }

    /// Logits for one encoder frame against one prediction state.
    pub fn join(
        &self,
        store: &ParameterStore,
        enc_frame: &Tensor,
        pred_state: &Tensor,
    ) -> Result<Tensor> {
        if enc_frame.numel() != self.cfg.encoder.model_dim {
            return Err(Error::usage(format!(
                "encoding frame has {} values, model_dim is {}",
                enc_frame.numel(),
                self.cfg.encoder.model_dim
            )));
        }
        if pred_state.numel() != self.cfg.pred_dim {
            return Err(Error::usage(format!(
                "prediction state has {} values, pred_dim is {}",
                pred_state.numel(),
                self.cfg.pred_dim
            )));
        }
        let mut tape = Tape::new(store);
        let e = tape.input(Tensor::new(vec![1, enc_frame.numel()], enc_frame.data().to_vec())?)?;
        let p = tape.input(Tensor::new(vec![1, pred_state.numel()], pred_state.data().to_vec())?)?;
        let logits = self.joint_nodes(&mut tape, e, p)?;
        Ok(tape.value(logits).clone())
    }
}

fn init_matrix(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    store.insert(name, Tensor::new(vec![rows, cols], data)?)
}

fn init_bias(store: &mut ParameterStore, name: &str, n: usize) -> Result<()> {
    store.insert(name, Tensor::zeros(vec![n]))
}

fn init_layer_norm(store: &mut ParameterStore, prefix: &str, n: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gain"), Tensor::new(vec![n], vec![1.0; n])?)?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(vec![n]))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 4,
            vocab_size: 5,
            encoder: EncoderConfig {
                num_blocks: 1,
                model_dim: 8,
                num_heads: 2,
                feedforward_dim: 8,
                use_depthwise_conv: false,
                conv_kernel: 3,
                downsample_factor: 1,
            },
            pred_dim: 6,
            joint_dim: 8,
        }
    }

    pub fn random_features(seed: u64, t: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn head_split_must_divide() {
        let mut cfg = tiny_config();
        cfg.encoder.model_dim = 9;
        assert!(Model::new(cfg).is_err());
    }

    #[test]
    fn single_frame_modes_coincide() {
        let cfg = tiny_config();
        let model = Model::new(cfg).unwrap();
        let store = model.init_params(1).unwrap();
        let x = random_features(2, 1, 4);
        let s = model.encode(&store, &x, Mode::Streaming).unwrap();
        let n = model.encode(&store, &x, Mode::Nonstreaming).unwrap();
        assert_eq!(s.data(), n.data());
    }

    #[test]
    fn streaming_outputs_ignore_future_frames_bitwise() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(3).unwrap();
        let x = random_features(4, 7, 4);
        let full = model.encode(&store, &x, Mode::Streaming).unwrap();
        for t in 0..6 {
            let mut perturbed = x.clone();
            for frame in t + 1..7 {
                for j in 0..4 {
                    perturbed.data_mut()[frame * 4 + j] += 5.0;
                }
            }
            let out = model.encode(&store, &perturbed, Mode::Streaming).unwrap();
            for pos in 0..=t {
                assert_eq!(
                    full.row(pos),
                    out.row(pos),
                    "streaming position {pos} changed after perturbing frames > {t}"
                );
            }
        }
    }

    #[test]
    fn nonstreaming_depends_on_future_frames() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(5).unwrap();
        let x = random_features(6, 5, 4);
        let base = model.encode(&store, &x, Mode::Nonstreaming).unwrap();
        let mut perturbed = x.clone();
        for j in 0..4 {
            perturbed.data_mut()[4 * 4 + j] += 1.0;
        }
        let out = model.encode(&store, &perturbed, Mode::Nonstreaming).unwrap();
        assert_ne!(base.row(0), out.row(0), "first frame should see the last frame");
    }

    #[test]
    fn downsampled_length_is_ceil() {
        let mut cfg = tiny_config();
        cfg.encoder.downsample_factor = 3;
        let model = Model::new(cfg).unwrap();
        let store = model.init_params(8).unwrap();
        for t in 1..=10 {
            let x = random_features(t as u64, t, 4);
            let out = model.encode(&store, &x, Mode::Nonstreaming).unwrap();
            assert_eq!(out.rows(), t.div_ceil(3));
        }
    }

    #[test]
    fn causality_respected_with_conv_and_downsampling() {
        let mut cfg = tiny_config();
        cfg.encoder.use_depthwise_conv = true;
        cfg.encoder.downsample_factor = 2;
        let model = Model::new(cfg).unwrap();
        let store = model.init_params(9).unwrap();
        let x = random_features(10, 9, 4);
        let full = model.encode(&store, &x, Mode::Streaming).unwrap();
        // Perturb the final stacked group (input frames 8..9): encoder
        // positions 0..4 must be untouched.
        let mut perturbed = x.clone();
        for j in 0..4 {
            perturbed.data_mut()[8 * 4 + j] -= 3.0;
        }
        let out = model.encode(&store, &perturbed, Mode::Streaming).unwrap();
        for pos in 0..4 {
            assert_eq!(full.row(pos), out.row(pos));
        }
        assert_ne!(full.row(4), out.row(4));
    }

    #[test]
    fn empty_prefix_has_single_state() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(11).unwrap();
        let states = model.predict(&store, &[]).unwrap();
        assert_eq!(states.shape(), &[1, 6]);
        assert_eq!(states.data(), store.get("pred.h0").unwrap().data());
    }

    #[test]
    fn prefix_states_are_causal() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(13).unwrap();
        let a = model.predict(&store, &[1, 2, 3]).unwrap();
        let b = model.predict(&store, &[1, 2, 4]).unwrap();
        for j in 0..3 {
            assert_eq!(a.row(j), b.row(j), "state {j} must ignore label {}", j + 1);
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn shared_first_label_shares_first_state() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(17).unwrap();
        let a = model.predict(&store, &[2, 1]).unwrap();
        let b = model.predict(&store, &[2, 3]).unwrap();
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn invalid_label_id_rejected() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(19).unwrap();
        assert!(model.predict(&store, &[7]).is_err());
    }

    #[test]
    fn zeroed_joint_gives_uniform_distribution() {
        let model = Model::new(tiny_config()).unwrap();
        let mut store = model.init_params(23).unwrap();
        for name in ["joint.out", "joint.b2"] {
            for v in store.tensor_mut(name).unwrap().data_mut() {
                *v = 0.0;
            }
        }
        let enc = Tensor::new(vec![1, 8], vec![0.3; 8]).unwrap();
        let pred = Tensor::new(vec![1, 6], vec![-0.2; 6]).unwrap();
        let logits = model.join(&store, &enc, &pred).unwrap();
        assert_eq!(logits.numel(), 5);
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn joint_rows_normalize_under_log_softmax() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(29).unwrap();
        let x = random_features(31, 4, 4);
        let mut tape = Tape::new(&store);
        let enc = model.encoder_nodes(&mut tape, &x, Mode::Nonstreaming).unwrap();
        let pred = model.predictor_nodes(&mut tape, &[1, 2]).unwrap();
        let logits = model.joint_nodes(&mut tape, enc, pred).unwrap();
        let lsm = tape.log_softmax_rows(logits).unwrap();
        let value = tape.value(lsm);
        assert_eq!(value.rows(), 4 * 3);
        for i in 0..value.rows() {
            let lse = crate::tensor::logsumexp(value.row(i)).unwrap();
            assert!(lse.abs() < 1e-12);
        }
    }

    #[test]
    fn join_dimension_mismatch_rejected() {
        let model = Model::new(tiny_config()).unwrap();
        let store = model.init_params(37).unwrap();
        let bad_enc = Tensor::new(vec![1, 7], vec![0.0; 7]).unwrap();
        let pred = Tensor::new(vec![1, 6], vec![0.0; 6]).unwrap();
        assert!(model.join(&store, &bad_enc, &pred).is_err());
    }
}
