//! Live knowledge tracing: tabular encoding of student interaction logs, a
//! streaming evaluation harness, classic baselines and an in-context
//! two-way attention predictor pretrained on simulated students.

pub mod baselines;
pub mod bench;
pub mod container;
pub mod data;
pub mod encoding;
pub mod eval;
pub mod error;
pub mod gbdt;
pub mod hash;
pub mod metrics;
pub mod minipfn;
pub mod pretrain;
pub mod prior;
pub mod synth;

pub use error::{Error, Result};
