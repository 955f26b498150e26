//! Contrastive vision-language training and zero-shot anatomy classification
//! on procedurally generated synthetic scans.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: reverse-mode autodiff on a flat tape, generic over the
//!   floating type so gradient checks can run in f64 while training runs f32.
//! - [`tokenizer`], [`labels`], [`prompts`]: word-level text pipeline and the
//!   anatomy taxonomy with its caption templates.
//! - [`image`], [`augment`]: 8-bit grayscale images and the deterministic
//!   augmentation bank (CLAHE, contrast, gamma, rotation, translation).
//! - [`dataset`]: synthetic scan generator and its manifest format.
//! - [`encoders`], [`contrastive`], [`optim`], [`train`]: the two toy
//!   transformer encoders, the symmetric batch loss, AdamW, and the loop.
//! - [`eval`], [`report`]: zero-shot classification, accuracy and
//!   one-vs-rest AUC, CSV/SVG reporting.
//! - [`checkpoint`], [`config`]: binary model snapshots and run settings.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod image;
pub mod labels;
pub mod optim;
pub mod prompts;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
