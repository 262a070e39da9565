//! Desk-scale laboratory for multimodal dialogue state tracking.
//!
//! The crate generates synthetic videos of attribute-typed objects together
//! with multi-turn dialogues about them, annotates every turn with a
//! multimodal dialogue state (a temporal window plus a set of
//! `(object, slot, value)` triples), and trains a transformer tracker that
//! decodes those states from object/segment-level video features and
//! dialogue context. Rule-based and recurrent baselines, a full evaluation
//! suite, ablation drivers, and a downstream response-prediction task round
//! out the lab.
//!
//! Heavy inner loops (corpus generation, batched gradients, rollout
//! evaluation, metric pooling) are data-parallel via `rayon` when the
//! `parallel` feature is enabled (the default); disabling it yields a fully
//! sequential build with identical results.

pub mod baselines;
pub mod dialogue;
pub mod error;
pub mod experiments;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod scene;
pub mod state;
pub mod vdtn;

pub use error::{Error, Result};
