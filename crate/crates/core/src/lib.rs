//! Partially supervised multi-label screening with frequency-domain feature
//! augmentation.
//!
//! A three-branch classifier (teacher plus two augmented students) trained on
//! partially labelled multi-domain data. The students perturb the
//! low-frequency content of intermediate feature maps — random amplitude
//! dropout on one branch, adversarially learned Gaussian noise on channel
//! statistics on the other — to push the shared backbone toward
//! domain-invariant, task-relevant features. Everything runs on a small
//! built-in tensor engine with reverse-mode differentiation so the whole
//! pipeline is checkable against finite differences.

pub mod augment;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod decouple;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod trainer;
pub mod verify;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
