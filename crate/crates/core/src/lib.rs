//! Dual decoding for sequence-to-sequence translation.
//!
//! One encoder feeds two decoders that generate two target sequences jointly,
//! each attending to the other's prefix. The crate bundles everything needed to
//! train and run such models on small tasks: a tensor/autodiff core, a BPE
//! subword model, the dual transformer, joint training, synchronous beam
//! search with its relaxed variants, corpus construction (including
//! code-switched data synthesis) and evaluation metrics.

pub mod datakit;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numcore;
pub mod search;
pub mod subword;
pub mod training;

pub mod cli;

pub use error::{Error, Result};
