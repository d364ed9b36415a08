//! Bias mitigation for frozen classifiers via fairness-aware input perturbation.
//!
//! A deployed classifier is treated as a fixed feature extractor `g` plus a
//! label predictor `f`. A perturbation generator `G` learns an L∞-bounded
//! additive perturbation that hides the protected attribute from `g`'s output
//! while preserving the target label, trained adversarially against a latent
//! attribute discriminator `D`. The crate also carries everything needed to
//! run that experiment end to end at desk scale: exact group-fairness
//! metrics, a planted-bias synthetic dataset, deployed-model training in four
//! flavors (normal / fair / label-flipped / reversed-gradient), before/after
//! evaluation, and Grad-CAM / 2-D embedding diagnostics.
//!
//! Everything in this crate is pure computation over in-memory values: file
//! formats, checkpoints, plots and the CLI live in the companion `faap`
//! crate. The crate is `no_std`-compatible (`alloc` required) when built with
//! `--no-default-features`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod faap;
pub mod gradcam;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod tsne;

pub use error::CoreError;
pub use tensor::Tensor;
