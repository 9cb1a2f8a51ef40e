//! Rank-adaptive dynamical low-rank training (TDLRT) for tensor layers in
//! Tucker format.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense d-mode tensors, mode-n unfolding/folding and n-mode
//!   products (Kolda column convention).
//! * [`linalg`] — deterministic QR and SVD primitives and the tail-energy
//!   truncation rule.
//! * [`tucker`] — Tucker representation, HOSVD, tolerance-driven rounding,
//!   storage accounting and binary serialization.
//! * [`model`] — dense and Tucker-factorized linear/conv2d layers with
//!   analytic gradients, plus losses.
//! * [`dlrt`] — the TDLRT optimizer: the efficient two-tape step, the
//!   reference per-mode variant, and a fixed-rank mode.
//! * [`baselines`] — naive simultaneous factor descent, Riemannian GD with
//!   HOSVD retraction, and dense SGD.
//! * [`data`] — MNIST IDX ingestion and synthetic low-rank problem
//!   generators with controlled spectra.
//! * [`harness`] — training loops, CSV logging, and the desk-scale
//!   experiments driven by the CLI.
//! * [`verify`] — the runtime self-check suite behind `tdlrt verify`.

pub mod baselines;
pub mod data;
pub mod dlrt;
mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod tensor;
pub mod tucker;
pub mod verify;

pub use error::{Error, Result};
