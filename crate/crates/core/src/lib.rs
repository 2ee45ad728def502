//! Joint speech and accent recognition with a shared-encoder transformer.
//!
//! The crate is `no_std` compatible (it needs `alloc`); the default `std`
//! feature only switches the math routines to the platform implementations
//! and enables `std::error::Error` for [`Error`].
//!
//! Layout:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: a small reverse-mode autodiff engine.
//! - [`params`], [`model`]: parameter storage, the transformer encoder/decoder
//!   and the pooled accent classifier that reads a chosen encoder layer.
//! - [`losses`]: CTC, label-smoothed attention cross-entropy, accent
//!   cross-entropy and their weighted combination.
//! - [`data`]: the synthetic accented corpus and feature augmentation.
//! - [`train`]: Noam schedule, Adam, the four training modes and the
//!   pretrain/fine-tune recipe.
//! - [`decode`]: CTC greedy decoding, attention beam search, joint rescoring,
//!   WER and accent accuracy.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod decode;
mod error;
pub mod gradcheck;
mod linalg;
pub mod losses;
pub mod math;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
