//! Core engine for a desk-scale factorized text/image-to-video diffusion model.
//!
//! Everything in this crate is pure computation over heap-allocated tensors:
//! a reverse-mode autodiff tape ([`tape`]), diffusion noise schedules with
//! resolution-dependent SNR shifting and zero-terminal-SNR rescaling
//! ([`schedule`]), a procedural moving-shape video generator with analytic
//! optical flow ([`scenegen`]), the factorized spatiotemporal denoiser with
//! adapter cross-attention and pixel-aware cross-attention ([`denoiser`]),
//! the flow-supervision head ([`predictnet`]), training and sampling loops
//! ([`diffusion`]), and evaluation metrics ([`metrics`]).
//!
//! The crate is `no_std`-compatible (with `alloc`); all transcendentals go
//! through `libm` so results are bit-identical with or without the `std`
//! feature. File formats, checkpointing, and the CLI live in the companion
//! `ti2v` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod denoiser;
pub mod diffusion;
mod error;
mod kernels;
pub mod metrics;
pub mod predictnet;
pub mod rng;
pub mod scalar;
pub mod scenegen;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
