//! Serving-side embedding tables that stay fresh through low-rank adapter
//! updates trained next to the inference path.
//!
//! The crate is organised around one idea: the base embedding table `W` is
//! frozen between full-parameter refreshes, and a sparse low-rank overlay
//! `A·B` absorbs everything learned in between.  Around that sit the pieces
//! that make it operable:
//!
//! * [`model`] — tables, adapters, the hot-index filter, lookups, folds and
//!   the checkpoint container.
//! * [`lowrank`] — truncated SVD, spectrum-driven rank selection and factor
//!   recompaction.
//! * [`adapt`] — gradient reservoir, usage tracking and the periodic
//!   rank/capacity controller.
//! * [`trainer`] — a small two-tower click model whose only trainable
//!   parameters are the adapters, plus mini-batch sampling.
//! * [`sync`] — sparse priority-merge replica synchronisation over a
//!   simulated fabric.
//! * [`scheduler`] — latency-feedback partitioning of compute units between
//!   inference and training.
//! * [`workload`] — Zipf-distributed click streams with drift, and the
//!   ring buffer that retains recent samples.

pub mod adapt;
pub mod lowrank;
pub mod mat;
pub mod model;
pub mod scheduler;
pub mod sync;
pub mod trainer;
pub mod workload;
