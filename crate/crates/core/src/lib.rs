//! Reuse of a masked language model pretrained on a high-resource language
//! for unsupervised and low-resource translation into a low-resource one.
//!
//! The pipeline has three phases:
//!
//! ```text
//!  HMR text ──BPE_HMR──> masked LM pretraining                (pretrain)
//!                              │
//!  HMR+LMR text ──BPE_joint──> vocabulary extension           (extend)
//!                              │    tied embedding/projection grows
//!                              ▼
//!                        masked LM fine-tuning, ±adapters     (finetune)
//!                              │
//!                              ▼
//!                  encoder-decoder init from the LM           (transfer)
//!                  DAE + online back-translation, or supervised
//! ```
//!
//! Everything is deterministic given a seed. Data-parallel inner loops run on
//! rayon behind the `parallel` feature and fall back to sequential code
//! without it; results are bitwise identical either way.

pub mod bpe;
pub mod corpus;
pub mod decode;
mod error;
pub mod numeric;
pub mod parallel;
pub mod synthetic;
pub mod training;
pub mod transformer;

pub use error::{CheckpointError, Error, Result};
