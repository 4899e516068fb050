//! Dataset-level evaluation reports and the relative metrics
//! (rWERR percent, rAELR milliseconds) against a named baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::build_context_window_opts;
use crate::context::WindowOptions;
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::par;
use crate::params::ParameterStore;
use crate::synthdata::Dataset;

use super::{greedy_decode, last_token_latency_ms, word_error_rate, SegmentRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub run_id: String,
    pub mode: Mode,
    pub past: usize,
    pub future: usize,
    pub beta: f64,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRow {
    pub session_id: String,
    pub utterance: usize,
    pub segment: usize,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub latency_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<SegmentRow>,
    /// Total edit errors divided by total reference tokens.
    pub wer: f64,
    /// Mean last-token latency over segments with a nonempty hypothesis.
    pub ael_ms: f64,
    pub empty_hypotheses: usize,
}

impl EvalReport {
    pub fn segments(&self) -> usize {
        self.rows.len()
    }

    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            run_id: self.meta.run_id.clone(),
            mode: self.meta.mode.to_string(),
            past: self.meta.past,
            future: self.meta.future,
            beta: self.meta.beta,
            checkpoint: self.meta.checkpoint.clone(),
            segments: self.segments(),
            wer: self.wer,
            ael_ms: self.ael_ms,
        }
    }
}

/// The one-row aggregate that travels through report CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub run_id: String,
    pub mode: String,
    pub past: usize,
    pub future: usize,
    pub beta: f64,
    pub checkpoint: String,
    pub segments: usize,
    pub wer: f64,
    pub ael_ms: f64,
}

/// Decode every labeled segment of the dataset under the given context
/// configuration. Utterances are decoded in parallel (order-preserving);
/// a streaming evaluation with future context is refused.
pub fn evaluate_dataset(
    model: &Model,
    store: &ParameterStore,
    dataset: &Dataset,
    past: usize,
    future: usize,
    max_symbols_per_frame: usize,
    separator_frames: usize,
    meta: ReportMeta,
) -> Result<EvalReport> {
    if matches!(meta.mode, Mode::Streaming) && future > 0 {
        return Err(Error::usage("student cannot see future utterances".to_string()));
    }
    let mode = meta.mode;
    let opts = WindowOptions { separator_frames };

    let mut jobs = Vec::new();
    for (s_idx, session) in dataset.sessions.iter().enumerate() {
        for u_idx in 0..session.utterances.len() {
            jobs.push((s_idx, u_idx));
        }
    }
    let per_utterance = par::map_slice(&jobs, |&(s_idx, u_idx)| -> Result<Vec<SegmentRow>> {
        let session = &dataset.sessions[s_idx];
        let utt = &session.utterances[u_idx];
        let window = build_context_window_opts(session, u_idx, past, future, opts)?;
        let mut rows = Vec::with_capacity(utt.segments.len());
        for (g_idx, segment) in utt.segments.iter().enumerate() {
            let seg_ref = SegmentRef {
                session_id: session.session_id.clone(),
                utterance: u_idx,
                segment: g_idx,
            };
            let decoded = greedy_decode(
                model,
                store,
                &window,
                segment,
                seg_ref,
                mode,
                max_symbols_per_frame,
            )?;
            let breakdown = word_error_rate(&decoded.tokens, &segment.labels)?;
            let latency = last_token_latency_ms(
                &decoded,
                &window,
                segment,
                dataset.frame_ms,
                model.config().encoder.downsample_factor,
            )?;
            rows.push(SegmentRow {
                session_id: session.session_id.clone(),
                utterance: u_idx,
                segment: g_idx,
                reference: segment.labels.clone(),
                hypothesis: decoded.tokens,
                substitutions: breakdown.substitutions,
                deletions: breakdown.deletions,
                insertions: breakdown.insertions,
                latency_ms: latency,
            });
        }
        Ok(rows)
    });

    let mut rows = Vec::new();
    for r in per_utterance {
        rows.extend(r?);
    }
    let total_ref: usize = rows.iter().map(|r| r.reference.len()).sum();
    let total_err: usize =
        rows.iter().map(|r| r.substitutions + r.deletions + r.insertions).sum();
    let latencies: Vec<f64> = rows.iter().filter_map(|r| r.latency_ms).collect();
    let empty = rows.len() - latencies.len();
    let ael = if latencies.is_empty() {
        f64::NAN
    } else {
        latencies.iter().sum::<f64>() / latencies.len() as f64
    };
    Ok(EvalReport {
        meta,
        wer: total_err as f64 / total_ref.max(1) as f64,
        ael_ms: ael,
        empty_hypotheses: empty,
        rows,
    })
}

/// Relative metrics, both signed so that positive means the candidate
/// improves on the baseline.
pub fn relative_metrics(
    baseline: &ReportSummary,
    candidate: &ReportSummary,
) -> Result<(f64, f64)> {
    if baseline.segments != candidate.segments {
        return Err(Error::usage(format!(
            "segment sets differ: {} vs {}",
            baseline.segments, candidate.segments
        )));
    }
    if baseline.wer == 0.0 {
        return Err(Error::usage("rWERR undefined: baseline WER is zero".to_string()));
    }
    let rwerr = 100.0 * (baseline.wer - candidate.wer) / baseline.wer;
    let raelr = baseline.ael_ms - candidate.ael_ms;
    Ok((rwerr, raelr))
}

const CSV_HEADER: &str = "run_id,mode,past,future,beta,checkpoint,segments,wer,ael_ms";

pub fn write_report_csv(summary: &ReportSummary, path: &Path) -> Result<()> {
    let row = format!(
        "{},{},{},{},{},{},{},{},{}\n",
        summary.run_id,
        summary.mode,
        summary.past,
        summary.future,
        summary.beta,
        summary.checkpoint,
        summary.segments,
        summary.wer,
        summary.ael_ms
    );
    std::fs::write(path, format!("{CSV_HEADER}\n{row}"))?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<ReportSummary> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty report".to_string() })?;
    if header.trim() != CSV_HEADER {
        return Err(Error::Parse { line: 1, msg: format!("unexpected header {header}") });
    }
    let row = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 2, msg: "missing aggregate row".to_string() })?;
    let fields: Vec<&str> = row.split(',').collect();
    if fields.len() != 9 {
        return Err(Error::Parse { line: 2, msg: format!("expected 9 fields, got {}", fields.len()) });
    }
    let parse_usize = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Parse { line: 2, msg: format!("{what}: {e}") })
    };
    let parse_f64 = |s: &str, what: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Parse { line: 2, msg: format!("{what}: {e}") })
    };
    Ok(ReportSummary {
        run_id: fields[0].to_string(),
        mode: fields[1].to_string(),
        past: parse_usize(fields[2], "past")?,
        future: parse_usize(fields[3], "future")?,
        beta: parse_f64(fields[4], "beta")?,
        checkpoint: fields[5].to_string(),
        segments: parse_usize(fields[6], "segments")?,
        wer: parse_f64(fields[7], "wer")?,
        ael_ms: parse_f64(fields[8], "ael_ms")?,
    })
}

/// Optional per-segment detail stream. The first line records metadata,
/// including the latency reference point, which is always the labeled
/// segment end.
pub fn write_segment_details(report: &EvalReport, path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    #[derive(Serialize)]
    struct DetailHeader<'a> {
        meta: &'a ReportMeta,
        latency_reference: &'static str,
        segments: usize,
        empty_hypotheses: usize,
    }
    writeln!(
        w,
        "{}",
        serde_json::to_string(&DetailHeader {
            meta: &report.meta,
            latency_reference: "segment_end",
            segments: report.segments(),
            empty_hypotheses: report.empty_hypotheses,
        })?
    )?;
    for row in &report.rows {
        writeln!(w, "{}", serde_json::to_string(row)?)?;
    }
    w.flush()?;
    Ok(())
}
