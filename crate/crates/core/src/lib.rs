//! Multi-granularity fine-grained classification.
//!
//! A sample carries one finest-level label; a [`taxonomy::Taxonomy`] lifts it
//! into a coarse-to-fine chain. Models share a backbone `f = F(x)` and attach
//! one linear head per level. The `Ours` variant splits `f` into one segment
//! per level and feeds each coarser head its own segment concatenated with
//! stop-gradient copies of every finer segment, so a level's loss only ever
//! shapes its own slice of the embedding.
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a define-by-run reverse-mode tape.
//! - [`taxonomy`]: label hierarchies, file format, label chains.
//! - [`data`]: synthetic hierarchical data, CSV datasets, batching.
//! - [`model`]: architecture variants, parameters, forward pass, weighted loss.
//! - [`eval`]: argmax prediction, per-level accuracy, consistency rate.
//! - [`train`]: SGD with momentum, training loop, alpha/beta sweeps.
//! - [`induce`]: hierarchy induction by average-linkage clustering.

pub mod data;
pub mod error;
pub mod eval;
pub mod induce;
pub mod model;
pub mod par;
pub mod seed;
pub mod taxonomy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
