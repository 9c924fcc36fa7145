//! Exposure correction by colour-shift estimation and modulation.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, the CLI and image decoding live in the companion
//! `chromashift` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod como;
pub mod cose;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod illumination;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod real;
pub mod reference;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use imaging::{ColorSpace, ImageTensor};
pub use params::ParamStore;
pub use real::Real;
pub use tensor::{Shape, Tensor};
