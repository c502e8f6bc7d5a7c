//! Engine for generalized continual category discovery.
//!
//! A model is trained on a sequence of partially labeled tasks. Each task runs
//! three phases: representation learning with projected knowledge
//! distillation ([`losses`], [`engine`]), semi-supervised centroid discovery
//! ([`clustering`]), and a learned correction of the latent drift of previously
//! stored centroids ([`adaptation`]). Inference is a task-agnostic nearest
//! centroid classifier; [`eval`] computes the accuracy matrix, forgetting,
//! plasticity and the drift diagnostics.
//!
//! Everything runs in `f64` on small dense MLPs built on [`diffcore`].

pub mod adaptation;
pub mod clustering;
pub mod datagen;
pub mod diffcore;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod parallel;
pub mod rng;

pub use error::{Error, Result};
