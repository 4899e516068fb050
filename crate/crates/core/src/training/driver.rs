//! Two-phase training driver.
//!
//! Phase 1 trains without context (P = F = 0) unless a warm-start
//! checkpoint is given; phase 2 trains with the configured context and
//! mode. Validation decoding runs under the same mode and context
//! configuration as the final system, and the checkpoint with the lowest
//! validation WER is kept. Identical seeds produce identical logs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::context::{build_context_window_opts, WindowOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, ReportMeta};
use crate::network::{load_checkpoint, save_checkpoint, Mode, Model, TrainMeta};
use crate::params::ParameterStore;
use crate::synthdata::{substream_seed, Dataset, Session};

use super::loss::{dual_mode_loss_nodes, single_mode_loss_nodes};
use super::{bucket_batches, lr_schedule, Adam, BucketItem, TrainConfig, TrainMode};

/// One JSON line per evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub iter: u64,
    pub phase: u8,
    pub loss_teacher: f64,
    pub loss_student: f64,
    pub loss_distill: f64,
    pub lr: f64,
    pub val_wer: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_dir: PathBuf,
    pub final_dir: PathBuf,
    pub log_path: PathBuf,
    pub best_val_wer: f64,
    pub final_step: u64,
    pub log: Vec<LogLine>,
}

/// Deterministic session-level split: the last ceil(fraction * n)
/// sessions validate, the rest train.
pub fn split_train_val(dataset: &Dataset, fraction: f64) -> (Dataset, Dataset) {
    let n = dataset.sessions.len();
    let mut val_count = ((n as f64) * fraction).ceil() as usize;
    if val_count >= n {
        val_count = n.saturating_sub(1);
    }
    let cut = n - val_count;
    let train = Dataset {
        feature_dim: dataset.feature_dim,
        frame_ms: dataset.frame_ms,
        vocab_size: dataset.vocab_size,
        sessions: dataset.sessions[..cut].to_vec(),
    };
    let val = Dataset {
        feature_dim: dataset.feature_dim,
        frame_ms: dataset.frame_ms,
        vocab_size: dataset.vocab_size,
        sessions: if val_count == 0 {
            dataset.sessions[..cut].to_vec()
        } else {
            dataset.sessions[cut..].to_vec()
        },
    };
    (train, val)
}

/// Window frame count for bucket assignment, without materializing the
/// features.
fn window_frames(session: &Session, index: usize, past: usize, future: usize, sep: usize) -> usize {
    let lo = index - past.min(index);
    let hi = index + future.min(session.utterances.len() - 1 - index);
    let frames: usize =
        session.utterances[lo..=hi].iter().map(|u| u.features.rows()).sum();
    frames + sep * (hi - lo)
}

fn trainable(utt: &crate::synthdata::Utterance) -> Vec<crate::context::Segment> {
    utt.segments.iter().filter(|s| !s.labels.is_empty()).cloned().collect()
}

/// Batches for one epoch of one phase, deterministic in
/// (config.seed, phase, epoch). Items are (session, utterance) pairs.
pub fn epoch_batches(
    config: &TrainConfig,
    dataset: &Dataset,
    past: usize,
    future: usize,
    phase: u8,
    epoch: u64,
) -> Result<(Vec<(usize, usize)>, Vec<Vec<usize>>)> {
    let mut items = Vec::new();
    let mut lens = Vec::new();
    for (s_idx, session) in dataset.sessions.iter().enumerate() {
        for (u_idx, utt) in session.utterances.iter().enumerate() {
            if utt.segments.iter().all(|s| s.labels.is_empty()) {
                continue;
            }
            items.push((s_idx, u_idx));
            lens.push(window_frames(session, u_idx, past, future, config.separator_frames));
        }
    }
    let bucket_items: Vec<BucketItem> = lens
        .iter()
        .enumerate()
        .map(|(id, &frames)| BucketItem { id, frames })
        .collect();
    let seed = substream_seed(config.seed, "shuffle", (phase as u64) << 32 | epoch);
    let batches = bucket_batches(
        &bucket_items,
        &config.bucket_boundaries,
        &config.bucket_batch_frames,
        seed,
    )?;
    Ok((items, batches))
}

struct RunningLoss {
    teacher: f64,
    student: f64,
    distill: f64,
    batches: u64,
}

impl RunningLoss {
    fn new() -> Self {
        RunningLoss { teacher: 0.0, student: 0.0, distill: 0.0, batches: 0 }
    }

    fn means(&self) -> (f64, f64, f64) {
        let n = self.batches.max(1) as f64;
        (self.teacher / n, self.student / n, self.distill / n)
    }
}

pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    warm_start: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate(Some(dataset))?;
    std::fs::create_dir_all(out_dir)?;
    let model = Model::new(config.model.clone())?;
    let (train_set, val_set) = split_train_val(dataset, config.val_fraction);

    let mut params = match warm_start {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            if &ckpt.config != model.config() {
                return Err(Error::config(
                    "warm-start checkpoint model configuration differs".to_string(),
                ));
            }
            ckpt.store
        }
        None => model.init_params(substream_seed(config.seed, "init", 0))?,
    };

    let meta = TrainMeta::new(config.mode.to_string(), config.past, config.future, config.beta);
    let mut adam = Adam::new();
    let mut log: Vec<LogLine> = Vec::new();
    let mut best: Option<(f64, u64)> = None;
    let best_dir = out_dir.join("best");
    let final_dir = out_dir.join("final");

    let mut phases: Vec<(u8, TrainMode, usize, usize, u64)> = Vec::new();
    if warm_start.is_none() && config.max_iters_phase1 > 0 {
        phases.push((1, config.phase1_mode(), 0, 0, config.max_iters_phase1));
    }
    if config.max_iters_phase2 > 0 {
        phases.push((2, config.mode, config.past, config.future, config.max_iters_phase2));
    }

    for (phase, mode, past, future, iters) in phases {
        run_phase(
            config, &model, &train_set, &val_set, &mut params, &mut adam, &mut log, &mut best,
            &best_dir, &meta, phase, mode, past, future, iters,
        )?;
    }

    // Degenerate schedules still select a checkpoint: evaluate as-is.
    if best.is_none() {
        let wer = validate(config, &model, &val_set, &params)?;
        log.push(LogLine {
            iter: params.step(),
            phase: 2,
            loss_teacher: 0.0,
            loss_student: 0.0,
            loss_distill: 0.0,
            lr: 0.0,
            val_wer: wer,
        });
        best = Some((wer, params.step()));
        save_checkpoint(&params, model.config(), params.step(), &best_dir, Some(meta.clone()))?;
    }

    save_checkpoint(&params, model.config(), params.step(), &final_dir, Some(meta))?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut text = String::new();
    for line in &log {
        text.push_str(&serde_json::to_string(line)?);
        text.push('\n');
    }
    std::fs::write(&log_path, text)?;

    let (best_val_wer, _) = best.expect("selection always runs");
    Ok(TrainOutcome {
        best_dir,
        final_dir,
        log_path,
        best_val_wer,
        final_step: params.step(),
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    config: &TrainConfig,
    model: &Model,
    train_set: &Dataset,
    val_set: &Dataset,
    params: &mut ParameterStore,
    adam: &mut Adam,
    log: &mut Vec<LogLine>,
    best: &mut Option<(f64, u64)>,
    best_dir: &Path,
    meta: &TrainMeta,
    phase: u8,
    mode: TrainMode,
    past: usize,
    future: usize,
    iters: u64,
) -> Result<()> {
    let opts = WindowOptions { separator_frames: config.separator_frames };
    let mut done = 0u64;
    let mut epoch = 0u64;
    let mut running = RunningLoss::new();

    while done < iters {
        let (items, batches) = epoch_batches(config, train_set, past, future, phase, epoch)?;
        if items.is_empty() {
            return Err(Error::config("no trainable utterances".to_string()));
        }
        for (batch_id, batch) in batches.iter().enumerate() {
            if done >= iters {
                break;
            }
            let iter = params.step() + 1;
            let lr = lr_schedule(iter, config);

            let tape_result = (|| -> Result<(crate::autodiff::Gradients, f64, f64, f64)> {
                let mut tape = Tape::new(params);
                let mut total: Option<crate::autodiff::NodeId> = None;
                let (mut t_sum, mut s_sum, mut d_sum) = (0.0, 0.0, 0.0);
                for &item in batch {
                    let (s_idx, u_idx) = items[item];
                    let session = &train_set.sessions[s_idx];
                    let segments = trainable(&session.utterances[u_idx]);
                    let utt_loss = match mode {
                        TrainMode::Nonstreaming => {
                            let window =
                                build_context_window_opts(session, u_idx, past, future, opts)?;
                            let node = single_mode_loss_nodes(
                                model, &mut tape, &window, &segments, Mode::Nonstreaming,
                            )?;
                            t_sum += tape.value(node).data()[0];
                            node
                        }
                        TrainMode::Streaming => {
                            let window =
                                build_context_window_opts(session, u_idx, past, 0, opts)?;
                            let node = single_mode_loss_nodes(
                                model, &mut tape, &window, &segments, Mode::Streaming,
                            )?;
                            s_sum += tape.value(node).data()[0];
                            node
                        }
                        TrainMode::Dual => {
                            let teacher =
                                build_context_window_opts(session, u_idx, past, future, opts)?;
                            let student =
                                build_context_window_opts(session, u_idx, past, 0, opts)?;
                            let nodes = dual_mode_loss_nodes(
                                model,
                                &mut tape,
                                &teacher,
                                &student,
                                &segments,
                                config.beta,
                                config.distill_mode,
                            )?;
                            for (t, s, k) in &nodes.per_segment {
                                t_sum += tape.value(*t).data()[0];
                                s_sum += tape.value(*s).data()[0];
                                d_sum += tape.value(*k).data()[0];
                            }
                            nodes.total
                        }
                    };
                    total = Some(match total {
                        Some(acc) => tape.add(acc, utt_loss)?,
                        None => utt_loss,
                    });
                }
                let total = total.ok_or_else(|| Error::usage("empty batch".to_string()))?;
                let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
                let grads = tape.backward(mean)?;
                let scale = 1.0 / batch.len() as f64;
                Ok((grads, t_sum * scale, s_sum * scale, d_sum * scale))
            })();

            let (grads, t_mean, s_mean, d_mean) = tape_result.map_err(|e| match e {
                Error::Numeric { op } => Error::Numeric {
                    op: format!("{op} (iteration {iter}, batch {batch_id})"),
                },
                other => other,
            })?;

            adam.step(params, &grads, lr)?;
            done += 1;
            running.teacher += t_mean;
            running.student += s_mean;
            running.distill += d_mean;
            running.batches += 1;

            if params.step() % config.eval_every == 0 || done == iters {
                let val_wer = validate(config, model, val_set, params)?;
                let (lt, ls, ld) = running.means();
                log.push(LogLine {
                    iter: params.step(),
                    phase,
                    loss_teacher: lt,
                    loss_student: ls,
                    loss_distill: ld,
                    lr,
                    val_wer,
                });
                running = RunningLoss::new();
                let improved = best.map(|(w, _)| val_wer < w).unwrap_or(true);
                if improved {
                    *best = Some((val_wer, params.step()));
                    save_checkpoint(
                        params,
                        model.config(),
                        params.step(),
                        best_dir,
                        Some(meta.clone()),
                    )?;
                }
            }
        }
        epoch += 1;
    }
    Ok(())
}

/// Validation WER under the training configuration's own mode and context.
fn validate(
    config: &TrainConfig,
    model: &Model,
    val_set: &Dataset,
    params: &ParameterStore,
) -> Result<f64> {
    let (mode, past, future) = match config.mode {
        TrainMode::Nonstreaming => (Mode::Nonstreaming, config.past, config.future),
        TrainMode::Streaming | TrainMode::Dual => (Mode::Streaming, config.past, 0),
    };
    let meta = ReportMeta {
        run_id: "validation".to_string(),
        mode,
        past,
        future,
        beta: config.beta,
        checkpoint: "in-training".to_string(),
    };
    let report = evaluate_dataset(
        model,
        params,
        val_set,
        past,
        future,
        config.max_symbols_per_frame,
        config.separator_frames,
        meta,
    )?;
    Ok(report.wer)
}
