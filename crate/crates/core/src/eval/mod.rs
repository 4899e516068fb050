//! Evaluation: greedy transducer decoding in both modes, error rates,
//! last-token emission latency, and the relative metrics used to compare
//! runs against a baseline.

mod decode;
mod latency;
mod report;
mod wer;

pub use decode::{greedy_decode, DecodeResult, SegmentRef};
pub use latency::last_token_latency_ms;
pub use report::{
    evaluate_dataset, read_report_csv, relative_metrics, write_report_csv, write_segment_details,
    EvalReport, ReportMeta, ReportSummary, SegmentRow,
};
pub use wer::{word_error_rate, WerBreakdown};
