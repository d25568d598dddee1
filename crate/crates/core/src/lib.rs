//! Desk-scale toolkit for unsupervised domain adaptation on fine-grained
//! action recognition.
//!
//! The crate covers the full chain:
//!
//! - [`handfeat`]: hand-centric feature pooling (box union, RoIAlign,
//!   average pooling, modality fusion);
//! - [`adversarial`]: gradient reversal, entropy measures, and the
//!   adversarial/attentive losses shared by both trainable models;
//! - [`handdet`]: a multi-level domain-adaptive hand detector with
//!   uncertainty-weighted context vectors;
//! - [`action`]: a temporal-relation action model with verb/noun heads and
//!   three tiers of domain discriminators;
//! - [`synth`]: a deterministic synthetic domain-shift benchmark with known
//!   ground truth;
//! - [`train`], [`metrics`], [`experiment`]: two-stage training
//!   orchestration, top-k evaluation, ensembling, and experiment presets.
//!
//! Everything runs on CPU in minutes; the `handshift` binary exposes the
//! pipeline as CLI subcommands.

pub mod action;
pub mod adversarial;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod config;
pub mod experiment;
pub mod handdet;
pub mod handfeat;
pub mod metrics;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
