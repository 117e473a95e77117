//! Head-wise sparse attention for long-context decoding.
//!
//! Query heads are split offline into *retrieval* heads, which keep a full
//! KV cache and pick a query-dependent top-p token set at decode time using a
//! low-rank pre-RoPE indexer, and *local* heads, which only see attention
//! sinks plus a sliding window. Every sparse path is checked against the
//! exact dense attention in [`workload::dense_attention`].

pub mod calibration;
pub mod distill;
pub mod engine;
pub mod error;
pub mod indexer;
pub mod numerics;
pub mod report;
pub mod rope;
pub mod seed;
pub mod selection;
pub mod tensorfile;
pub mod workload;

pub use error::{Error, Result};
