//! Parallel separable 3D convolution.
//!
//! Decomposes 3D convolution kernels into sums of separable (2D x 1D)
//! kernels through HOSVD, builds `P_mSC_n` blocks (m parallel streams of
//! n 2D convolutions followed by one 1D convolution), rewrites layer graphs
//! to use those blocks and trains small models on synthetic tasks.
//!
//! The crate is `no_std` and only needs `alloc`. File formats and the
//! command-line front end live in the `psc` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod block;
pub mod decomp;
mod error;
pub mod fixtures;
pub mod graph;
pub mod linalg;
mod math;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Axis, ConvSpec, Tensor};
