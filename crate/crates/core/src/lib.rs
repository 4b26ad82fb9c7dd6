//! Numerical core of a deraining transformer built on top-k sparse channel
//! attention.
//!
//! The crate is `no_std` and only needs an allocator. File formats, image
//! codecs and the command line live in the `drsformer` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod autodiff;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod init;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod rain;
pub mod real;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
