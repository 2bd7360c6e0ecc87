//! Core library for a mask-free, text-instructed virtual try-on model at toy
//! scale: a tape-based reverse-mode autodiff engine, a procedural triplet
//! dataset with exact garment masks, a DiT-style velocity network with
//! attention-map extraction, a flow-matching trainer and deterministic ODE
//! sampler, and an evaluation suite (SSIM, Fréchet feature distance,
//! rule-based attribute oracle, attention-mass diagnostics).
//!
//! Everything is deterministic given explicit seeds: no global RNG, no
//! wall-clock state, and all file formats round-trip bit-exactly.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
