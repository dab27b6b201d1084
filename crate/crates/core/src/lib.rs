//! Latent-space rephotography of antique portraits.
//!
//! This crate holds the numerical core: a small reverse-mode autodiff tape,
//! the film/camera degradation model, a style-based generator with
//! per-resolution ToRGB taps, VGG-style perceptual backbones, the composite
//! objective, the sibling encoder and the two-stage latent projector.
//!
//! Everything here is `no_std` + `alloc`. File formats, checkpoints and the
//! command line live in the `rephoto` crate.
#![no_std]
#![warn(missing_debug_implementations)]
#![allow(
    clippy::too_many_arguments,
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord
)]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod features;
pub mod generator;
pub mod graph;
pub mod imagecore;
pub mod losses;
pub mod optim;
pub mod projector;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
