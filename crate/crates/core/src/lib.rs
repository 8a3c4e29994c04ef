//! Differentiable architecture search over a hybrid spatial/spectral search
//! space for hyperspectral image classification, with an attention block
//! grafted onto the derived network.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`params`], [`optim`], [`checkpoint`],
//!   [`gradcheck`]: a small dense tensor library with reverse-mode
//!   differentiation, parameter storage, optimizers, a tensor container and
//!   a finite-difference checker.
//! - [`nn`]: 3D convolutions, batch normalization, activations, softmax,
//!   matrix products and the masked cross-entropy.
//! - [`search_space`], [`supernet`], [`search`], [`derivation`]: candidate
//!   menus, the supernet, its bilevel search, and genotype derivation.
//! - [`transformer`], [`network`]: the attention block and the compact
//!   network built from a genotype.
//! - [`data`], [`pipeline`], [`config`], [`workflow`]: the cube container,
//!   sampling, training, overlap inference, metrics, run configuration and
//!   the stage functions the command-line tool is built on.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod derivation;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;
pub mod transformer;
pub mod workflow;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/quickstart.md")]
mod book_quickstart {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/autodiff.md")]
mod book_autodiff {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/search-space.md")]
mod book_search_space {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/search.md")]
mod book_search {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/derivation.md")]
mod book_derivation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/attention.md")]
mod book_attention {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/pipeline.md")]
mod book_pipeline {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/configuration.md")]
mod book_configuration {}
