//! Adaptive vision-transformer tracking engine.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] is a small dense-tensor engine with reverse-mode
//!   differentiation.
//! * [`vit`] is the single-stream backbone whose blocks are gated per input
//!   by activation modules.
//! * [`mi`] holds the Jensen-Shannon mutual-information estimator and the
//!   view-invariance objective.
//! * [`distill`] implements multi-teacher feature distillation.
//! * [`head`] covers the prediction head, box decoding, training losses and
//!   the stateful tracker.
//! * [`data`] and [`eval`] generate synthetic sequences, read and write them,
//!   and score trackers.
//! * [`config`], [`checkpoint`], [`train`] and [`cli`] tie everything into
//!   runnable workflows.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geom;
pub mod head;
pub mod layout;
pub mod mi;
pub mod model;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
