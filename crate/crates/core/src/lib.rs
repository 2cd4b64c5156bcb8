//! Hydrogen-atom-transfer (HAT) dataset generation, labeling, neural
//! potential training and evaluation.
//!
//! The crate is organised bottom-up:
//!
//! * [`units`], [`structure`], [`rng`], [`xyz`]: shared primitives and IO.
//! * [`calc`]: energy/force calculators behind the [`calc::Calculator`] trait,
//!   selected by name through [`calc::CalculatorRegistry`].
//! * [`nms`]: relaxation, finite-difference Hessians and normal-mode sampling.
//! * [`templates`]: the packaged peptide-like structure library.
//! * [`hatbuild`]: radical systems, reaction configurations and linear
//!   interpolation paths with barrier extraction.
//! * [`mlp`]: the invariant message-passing potential and its trainer.
//! * [`eval`]: metrics, splits, learning curves, transferability, barriers.
//! * [`pipeline`]: config-driven orchestration used by the `hatlab` binary.

pub mod calc;
pub mod error;
pub mod eval;
pub mod geom;
pub mod hatbuild;
pub mod manifest;
pub mod mlp;
pub mod nms;
pub mod pipeline;
pub mod rng;
pub mod structure;
pub mod templates;
pub mod units;
pub mod xyz;

pub use error::{Error, Result};
pub use structure::Structure;
