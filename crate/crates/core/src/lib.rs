//! Train structured-data classifiers with guidance from a note-embedding
//! teacher, using contrastive alignment (InfoNCE) and contrastive knowledge
//! distillation, then evaluate them with AUROC, bootstrap intervals and
//! abstention diagnostics.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod features;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
