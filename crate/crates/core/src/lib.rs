//! Source-free subject adaptation for EEG-based visual recognition.
//!
//! The workflow has three stages:
//!
//! 1. [`pipeline::train_source`] fits a GRU classifier on the source subjects.
//! 2. [`pipeline::train_generator`] fits a class-conditional feature generator
//!    against the frozen source classifier, with no access to source data.
//! 3. [`pipeline::adapt_target`] fine-tunes a copy of the source classifier on
//!    k labelled samples per class from a new subject, aligning its
//!    embeddings with generated pseudo-source features via MMD or an
//!    inter-subject contrastive loss.
//!
//! [`data`] provides the on-disk dataset container and a synthetic
//! multi-subject benchmark; [`eval`] runs k-shot grids and renders reports.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod pipeline;

pub use error::{Error, Result};
