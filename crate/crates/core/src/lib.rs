//! Multi-stage diffusion models whose diffusion mean is progressively
//! transformed (downsampled, blurred or encoded) from one stage to the next.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation: noise and stage schedules, the transformation stacks, the
//! forward and reverse process, a small double-prediction denoiser with
//! hand-written backpropagation, the training objective and the unified
//! DDPM/DDIM sampler. File formats, corpora and the command line live in the
//! `fdm` crate.
#![cfg_attr(not(any(test, feature = "std")), no_std)]
#![deny(unsafe_code)]
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

mod error;
pub mod tensor;

pub mod denoiser;
pub mod diffusion;
pub mod sampler;
pub mod schedules;
pub mod trainer;
pub mod transforms;

mod linalg;
mod rng;

pub use error::{Error, Result};
pub use linalg::Real;
pub use rng::{seeded, standard_normal, standard_normal_tensor, standard_normal_vec, uniform, Rng};
pub use tensor::{Shape, Tensor};
