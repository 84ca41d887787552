//! Revealed-preference toolkit.
//!
//! Pairwise task choices are aggregated into per-task utilities with a
//! Thurstonian choice model, linear probes are trained on residual-stream
//! activations to predict those utilities, and the resulting direction is
//! tested with steering, ablation, and end-of-turn patching against any
//! backend implementing [`interventions::HookedBackend`].
//!
//! [`simbackend`] provides a constructed linear-Gaussian backend whose
//! ground truth is known, so every analysis has an analytic oracle.

pub mod activationstore;
pub mod choicemodel;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod interventions;
pub mod personalab;
pub mod probekit;
pub mod seeding;
pub mod simbackend;
pub mod statlab;

pub use error::{Error, Result};
