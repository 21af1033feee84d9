//! A desk-scale laboratory for single-step adversarial training.
//!
//! The crate provides, end to end:
//!
//! - a minimal differentiable classifier (dense / conv / ReLU layers,
//!   softmax cross-entropy, exact reverse-mode gradients, SGD with
//!   momentum) — [`nn`];
//! - L-infinity attacks: FGSM, random-init single-step ("fast"), PGD with
//!   restarts, and a checkpoint-scaled single-step attack that probes
//!   interior points of the adversarial direction — [`attack`];
//! - training loops for clean, FGSM, fast, PGD, checkpoint-scaled and
//!   epsilon-scheduled methods, with structured per-batch logging and a
//!   robustness-collapse monitor — [`train`];
//! - diagnostics: decision-boundary distortion, the loss-nonlinearity
//!   measure gamma, robust accuracy, perturbation/gradient norms —
//!   [`metrics`];
//! - loss-surface grids over (adversarial direction, random direction)
//!   planes with CSV export — [`surface`];
//! - dataset loaders (synthetic Gaussian blobs, CIFAR-10 binary, IDX) and
//!   run-log persistence — [`data`].
//!
//! Everything is seeded and single-threaded: a run is reproducible
//! byte-for-byte from its config and seed. The companion mdbook under
//! `book/` walks through the concepts; its code snippets compile against
//! this crate.

pub mod array;
pub mod attack;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod surface;
pub mod train;

pub use array::{sgn, DenseArray};
pub use error::{Error, Result};
pub use nn::{Classifier, LabeledBatch, Layer, Model, ModelSpec, ModelState};
