//! Synthetic contextual sessions.
//!
//! Every session carries a hidden latent (think speaker/topic/room). Frames
//! are token prototypes plus a per-latent bias plus gaussian noise, and the
//! prototype set is constructed so that for designated token pairs (a, b)
//! and latent pairs (k1, k2):
//!
//!   prototype(a) + bias(k1) == prototype(b) + bias(k2)
//!
//! exactly. A frame of token `a` in a k1-session is therefore statistically
//! indistinguishable from token `b` in a k2-session unless the latent is
//! known — and the latent is revealed by anchor tokens (one reserved id per
//! latent) scattered across the session's utterances. More visible context
//! means a higher chance that an anchor is in view.
//!
//! The additive-gaussian construction keeps the Bayes-optimal classifier in
//! closed form, so the value of context can be verified without training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::context::Segment;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub const DATASET_SCHEMA: u32 = 1;

/// Where a session's anchor tokens are placed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AnchorPolicy {
    /// Each utterance independently contains the anchor with this
    /// probability.
    Random { prob: f64 },
    /// Only the first utterance of the session.
    First,
    /// Every utterance.
    Every,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Distinct token ids (blank excluded); ids run 1..=vocab_size and the
    /// last `latent_count` of them are reserved as anchors.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Number of session latents K.
    pub latent_count: usize,
    /// Designed-collision token pairs built into the prototype set.
    pub ambiguous_pairs: usize,
    /// Sampling weight of the session's ambiguous token relative to other
    /// content tokens (1.0 = uniform).
    pub ambiguous_boost: f64,
    pub prototype_scale: f64,
    pub bias_scale: f64,
    pub noise_std: f64,
    pub frames_per_token: (usize, usize),
    pub tokens_per_utterance: (usize, usize),
    pub utterances_per_session: (usize, usize),
    pub segments_per_utterance: usize,
    pub anchor_token_policy: AnchorPolicy,
    pub num_sessions: usize,
    pub frame_ms: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 12,
            feature_dim: 16,
            latent_count: 4,
            ambiguous_pairs: 2,
            ambiguous_boost: 1.0,
            prototype_scale: 1.0,
            bias_scale: 1.0,
            noise_std: 0.3,
            frames_per_token: (5, 7),
            tokens_per_utterance: (4, 9),
            utterances_per_session: (3, 5),
            segments_per_utterance: 1,
            anchor_token_policy: AnchorPolicy::Random { prob: 0.5 },
            num_sessions: 50,
            frame_ms: 10.0,
            seed: 1,
        }
    }
}

impl SynthConfig {
    /// Vocabulary size including the blank at index 0, as models see it.
    pub fn model_vocab(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn content_tokens(&self) -> usize {
        self.vocab_size - self.latent_count
    }

    /// Anchor token id for a latent (the last `latent_count` ids).
    pub fn anchor_token(&self, latent: usize) -> usize {
        self.content_tokens() + 1 + latent
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_count == 0 || self.vocab_size <= self.latent_count {
            return Err(Error::config(format!(
                "need vocab_size > latent_count, got {} vs {}",
                self.vocab_size, self.latent_count
            )));
        }
        if 2 * self.ambiguous_pairs > self.content_tokens() {
            return Err(Error::config(format!(
                "{} ambiguous pairs need {} content tokens, only {} available",
                self.ambiguous_pairs,
                2 * self.ambiguous_pairs,
                self.content_tokens()
            )));
        }
        if self.ambiguous_pairs > 0 && self.latent_count < 2 {
            return Err(Error::config("ambiguity needs at least two latents".to_string()));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive".to_string()));
        }
        let ranges = [
            self.frames_per_token,
            self.tokens_per_utterance,
            self.utterances_per_session,
        ];
        if ranges.iter().any(|(lo, hi)| *lo == 0 || lo > hi) {
            return Err(Error::config("invalid range (zero or inverted)".to_string()));
        }
        if self.segments_per_utterance == 0 {
            return Err(Error::config("segments_per_utterance must be >= 1".to_string()));
        }
        if let AnchorPolicy::Random { prob } = self.anchor_token_policy {
            if !(0.0..=1.0).contains(&prob) {
                return Err(Error::config(format!("anchor probability {prob} outside [0,1]")));
            }
        }
        Ok(())
    }
}

/// One utterance: features plus labeled segments, a session id, and its
/// position within the session.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub session_id: String,
    pub index: usize,
    pub features: Tensor,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub utterances: Vec<Utterance>,
}

/// A dataset: header metadata plus sessions in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_dim: usize,
    pub frame_ms: f64,
    /// Model vocabulary including blank.
    pub vocab_size: usize,
    pub sessions: Vec<Session>,
}

impl Dataset {
    pub fn total_utterances(&self) -> usize {
        self.sessions.iter().map(|s| s.utterances.len()).sum()
    }

    pub fn total_segments(&self) -> usize {
        self.sessions
            .iter()
            .flat_map(|s| &s.utterances)
            .map(|u| u.segments.len())
            .sum()
    }
}

/// A designed collision: token_a in latent_a looks exactly like token_b in
/// latent_b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AmbiguousPair {
    pub token_a: usize,
    pub token_b: usize,
    pub latent_a: usize,
    pub latent_b: usize,
}

/// Deterministic prototype set derived from the config seed.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    /// Indexed by token id; entry 0 (blank) is unused.
    pub prototypes: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub ambiguous: Vec<AmbiguousPair>,
}

impl PrototypeSet {
    pub fn mean(&self, token: usize, latent: usize) -> Vec<f64> {
        self.prototypes[token]
            .iter()
            .zip(&self.biases[latent])
            .map(|(p, b)| p + b)
            .collect()
    }

    /// Tokens that are ambiguous inside a session of the given latent.
    pub fn ambiguous_tokens_for(&self, latent: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for pair in &self.ambiguous {
            if pair.latent_a == latent {
                out.push(pair.token_a);
            }
            if pair.latent_b == latent {
                out.push(pair.token_b);
            }
        }
        out
    }
}

/// Stable 64-bit stream id for (seed, name, index); every consumer of
/// randomness derives its own stream so streams never alias.
pub fn substream_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= seed.rotate_left(17);
    h = h.wrapping_mul(0x100000001b3);
    h ^= index.rotate_left(31);
    h = h.wrapping_mul(0x100000001b3);
    h
}

pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, name, index))
}

/// Build the prototype set: random prototypes and biases, then overwrite
/// the second token of each ambiguous pair to force the exact collision.
pub fn build_prototypes(config: &SynthConfig) -> Result<PrototypeSet> {
    config.validate()?;
    let mut rng = substream(config.seed, "prototypes", 0);
    let d = config.feature_dim;
    let mut biases: Vec<Vec<f64>> = Vec::with_capacity(config.latent_count);
    for _ in 0..config.latent_count {
        biases.push((0..d).map(|_| rng.random_range(-config.bias_scale..config.bias_scale)).collect());
    }
    let mut prototypes = vec![vec![0.0; d]];
    for _ in 1..=config.vocab_size {
        prototypes.push(
            (0..d)
                .map(|_| rng.random_range(-config.prototype_scale..config.prototype_scale))
                .collect(),
        );
    }
    let mut ambiguous = Vec::with_capacity(config.ambiguous_pairs);
    for pair in 0..config.ambiguous_pairs {
        let token_a = 2 * pair + 1;
        let token_b = 2 * pair + 2;
        let latent_a = (2 * pair) % config.latent_count;
        let latent_b = (2 * pair + 1) % config.latent_count;
        // prototype(b) = prototype(a) + bias(a-latent) - bias(b-latent)
        let forced: Vec<f64> = (0..d)
            .map(|j| prototypes[token_a][j] + biases[latent_a][j] - biases[latent_b][j])
            .collect();
        prototypes[token_b] = forced;
        ambiguous.push(AmbiguousPair { token_a, token_b, latent_a, latent_b });
    }
    Ok(PrototypeSet { prototypes, biases, ambiguous })
}

/// True token placements for oracle evaluation; not part of the dataset
/// file format.
#[derive(Debug, Clone)]
pub struct SessionTruth {
    pub latent: usize,
    pub spans: Vec<TokenSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSpan {
    pub utterance: usize,
    pub start: usize,
    pub end: usize,
    pub token: usize,
}

pub fn generate_session(config: &SynthConfig, session_seed: u64) -> Result<Session> {
    Ok(generate_session_with_truth(config, session_seed)?.0)
}

pub fn generate_session_with_truth(
    config: &SynthConfig,
    session_seed: u64,
) -> Result<(Session, SessionTruth)> {
    let protos = build_prototypes(config)?;
    generate_with_prototypes(config, &protos, session_seed)
}

/// Generation with a prebuilt prototype set (avoids rebuilding it per
/// session when generating datasets).
pub fn generate_with_prototypes(
    config: &SynthConfig,
    protos: &PrototypeSet,
    session_seed: u64,
) -> Result<(Session, SessionTruth)> {
    let mut rng = substream(config.seed, "session", session_seed);
    let latent = rng.random_range(0..config.latent_count);
    let session_id = format!("s{session_seed:06}");
    let num_utts = rng.random_range(config.utterances_per_session.0..=config.utterances_per_session.1);

    let ambiguous = protos.ambiguous_tokens_for(latent);
    let content = config.content_tokens();
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::config(format!("noise_std: {e}")))?;

    let mut utterances = Vec::with_capacity(num_utts);
    let mut spans = Vec::new();
    for index in 0..num_utts {
        let n_tokens =
            rng.random_range(config.tokens_per_utterance.0..=config.tokens_per_utterance.1);
        let mut tokens = Vec::with_capacity(n_tokens + 1);
        for _ in 0..n_tokens {
            tokens.push(sample_content_token(&mut rng, content, &ambiguous, config.ambiguous_boost));
        }
        let place_anchor = match config.anchor_token_policy {
            AnchorPolicy::Random { prob } => rng.random_range(0.0..1.0) < prob,
            AnchorPolicy::First => index == 0,
            AnchorPolicy::Every => true,
        };
        if place_anchor {
            let at = rng.random_range(0..=tokens.len());
            tokens.insert(at, config.anchor_token(latent));
        }

        let mut frames: Vec<f64> = Vec::new();
        let mut token_bounds = Vec::with_capacity(tokens.len());
        let mut cursor = 0usize;
        for &token in &tokens {
            let span = rng.random_range(config.frames_per_token.0..=config.frames_per_token.1);
            let mean = protos.mean(token, latent);
            for _ in 0..span {
                for m in &mean {
                    let eps = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    frames.push(m + eps);
                }
            }
            token_bounds.push((cursor, cursor + span, token));
            cursor += span;
        }
        for &(start, end, token) in &token_bounds {
            spans.push(TokenSpan { utterance: index, start, end, token });
        }

        let segments = split_segments(&token_bounds, config.segments_per_utterance);
        utterances.push(Utterance {
            session_id: session_id.clone(),
            index,
            features: Tensor::new(vec![cursor, config.feature_dim], frames)?,
            segments,
        });
    }
    Ok((Session { session_id, utterances }, SessionTruth { latent, spans }))
}

fn sample_content_token(
    rng: &mut ChaCha8Rng,
    content: usize,
    ambiguous: &[usize],
    boost: f64,
) -> usize {
    let extra = (boost - 1.0).max(0.0);
    let total = content as f64 + extra * ambiguous.len() as f64;
    let mut x = rng.random_range(0.0..total);
    for &amb in ambiguous {
        if x < boost {
            return amb;
        }
        x -= boost;
    }
    // Remaining mass is uniform over the non-boosted tokens.
    let mut id = 1;
    loop {
        if !ambiguous.contains(&id) {
            if x < 1.0 {
                return id;
            }
            x -= 1.0;
        }
        id += 1;
        if id > content {
            return content;
        }
    }
}

/// Split a token sequence into contiguous labeled segments that tile the
/// utterance.
fn split_segments(bounds: &[(usize, usize, usize)], segments: usize) -> Vec<Segment> {
    let n = bounds.len();
    let pieces = segments.min(n).max(1);
    let per = n.div_ceil(pieces);
    let mut out = Vec::with_capacity(pieces);
    let mut at = 0;
    while at < n {
        let hi = (at + per).min(n);
        out.push(Segment {
            start: bounds[at].0,
            end: bounds[hi - 1].1,
            labels: bounds[at..hi].iter().map(|b| b.2).collect(),
        });
        at = hi;
    }
    out
}

/// Generate a whole dataset (parallel over sessions; deterministic because
/// each session derives its own stream).
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset> {
    let protos = build_prototypes(config)?;
    let results = par::map_range(config.num_sessions, |i| {
        generate_with_prototypes(config, &protos, i as u64).map(|(s, _)| s)
    });
    let mut sessions = Vec::with_capacity(config.num_sessions);
    for r in results {
        sessions.push(r?);
    }
    Ok(Dataset {
        feature_dim: config.feature_dim,
        frame_ms: config.frame_ms,
        vocab_size: config.model_vocab(),
        sessions,
    })
}

// ── Bayes oracle ─────────────────────────────────────────────────────

/// Closed-form classification accuracies over generated sessions: maximum
/// likelihood with the true latent known ("with context") versus the
/// latent marginalized out ("without context").
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesReport {
    pub with_context: f64,
    pub without_context: f64,
    pub ambiguous_with: f64,
    pub ambiguous_without: f64,
    pub ambiguous_count: usize,
    pub total_count: usize,
}

pub fn bayes_oracle(config: &SynthConfig, sessions: usize) -> Result<BayesReport> {
    let protos = build_prototypes(config)?;
    let mut with_hits = 0usize;
    let mut without_hits = 0usize;
    let mut amb_with = 0usize;
    let mut amb_without = 0usize;
    let mut amb_total = 0usize;
    let mut total = 0usize;

    for s in 0..sessions {
        let (session, truth) = generate_with_prototypes(config, &protos, s as u64)?;
        let ambiguous = protos.ambiguous_tokens_for(truth.latent);
        for span in &truth.spans {
            let features = &session.utterances[span.utterance].features;
            let frames: Vec<&[f64]> = (span.start..span.end).map(|t| features.row(t)).collect();
            let with = classify_with_latent(config, &protos, &frames, truth.latent);
            let without = classify_marginal(config, &protos, &frames);
            total += 1;
            with_hits += (with == span.token) as usize;
            without_hits += (without == span.token) as usize;
            if ambiguous.contains(&span.token) {
                amb_total += 1;
                amb_with += (with == span.token) as usize;
                amb_without += (without == span.token) as usize;
            }
        }
    }
    Ok(BayesReport {
        with_context: with_hits as f64 / total as f64,
        without_context: without_hits as f64 / total as f64,
        ambiguous_with: if amb_total > 0 { amb_with as f64 / amb_total as f64 } else { 1.0 },
        ambiguous_without: if amb_total > 0 { amb_without as f64 / amb_total as f64 } else { 1.0 },
        ambiguous_count: amb_total,
        total_count: total,
    })
}

fn log_likelihood(frames: &[&[f64]], mean: &[f64], noise_std: f64) -> f64 {
    let inv = 1.0 / (2.0 * noise_std * noise_std).max(1e-12);
    let mut total = 0.0;
    for frame in frames {
        let mut d2 = 0.0;
        for (x, m) in frame.iter().zip(mean) {
            d2 += (x - m) * (x - m);
        }
        total -= d2 * inv;
    }
    total
}

fn classify_with_latent(
    config: &SynthConfig,
    protos: &PrototypeSet,
    frames: &[&[f64]],
    latent: usize,
) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for token in 1..=config.vocab_size {
        let ll = log_likelihood(frames, &protos.mean(token, latent), config.noise_std);
        if ll > best.0 {
            best = (ll, token);
        }
    }
    best.1
}

fn classify_marginal(config: &SynthConfig, protos: &PrototypeSet, frames: &[&[f64]]) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for token in 1..=config.vocab_size {
        let per_latent: Vec<f64> = (0..config.latent_count)
            .map(|k| log_likelihood(frames, &protos.mean(token, k), config.noise_std))
            .collect();
        let ll = crate::tensor::logsumexp(&per_latent).expect("nonempty latents");
        if ll > best.0 {
            best = (ll, token);
        }
    }
    best.1
}

// ── Dataset file format: JSON Lines ──────────────────────────────────

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    schema: u32,
    feature_dim: usize,
    frame_ms: f64,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    session_id: String,
    index: usize,
    frames: Vec<Vec<f64>>,
    segments: Vec<Segment>,
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header = HeaderLine {
        schema: DATASET_SCHEMA,
        feature_dim: dataset.feature_dim,
        frame_ms: dataset.frame_ms,
        vocab_size: dataset.vocab_size,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for session in &dataset.sessions {
        for utt in &session.utterances {
            let line = UtteranceLine {
                session_id: utt.session_id.clone(),
                index: utt.index,
                frames: (0..utt.features.rows()).map(|t| utt.features.row(t).to_vec()).collect(),
                segments: utt.segments.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();

    let header_text = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file, header expected".to_string() })?;
    let header: HeaderLine = serde_json::from_str(&header_text)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.schema != DATASET_SCHEMA {
        return Err(Error::Parse {
            line: 1,
            msg: format!("schema {} unsupported (want {DATASET_SCHEMA})", header.schema),
        });
    }

    let mut sessions: Vec<Session> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: UtteranceLine = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        if parsed.frames.is_empty() {
            return Err(Error::Parse { line: line_no, msg: "utterance with no frames".to_string() });
        }
        if parsed.frames.iter().any(|f| f.len() != header.feature_dim) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("frame width differs from feature_dim {}", header.feature_dim),
            });
        }
        let features = Tensor::new(
            vec![parsed.frames.len(), header.feature_dim],
            parsed.frames.concat(),
        )
        .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let utt = Utterance {
            session_id: parsed.session_id,
            index: parsed.index,
            features,
            segments: parsed.segments,
        };
        match sessions.last_mut() {
            Some(last) if last.session_id == utt.session_id => {
                if utt.index != last.utterances.len() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!(
                            "utterance index {} out of order (expected {})",
                            utt.index,
                            last.utterances.len()
                        ),
                    });
                }
                last.utterances.push(utt);
            }
            _ => {
                if utt.index != 0 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("session {} does not start at index 0", utt.session_id),
                    });
                }
                sessions.push(Session { session_id: utt.session_id.clone(), utterances: vec![utt] });
            }
        }
    }
    Ok(Dataset {
        feature_dim: header.feature_dim,
        frame_ms: header.frame_ms,
        vocab_size: header.vocab_size,
        sessions,
    })
}
