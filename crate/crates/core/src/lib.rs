//! Desk-scale laboratory for contextual-utterance and dual-mode transducer
//! training: a small f64 autodiff substrate, the transducer lattice losses
//! with exhaustive oracles, a dual-mode encoder over one shared parameter
//! store, synthetic contextual sessions, the training driver, and greedy
//! decoding with error-rate and emission-latency metrics.

pub mod autodiff;
pub mod check;
pub mod cli;
pub mod context;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod network;
pub mod par;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
