//! File formats, asset handling and the command-line pipeline around
//! [`rephoto_core`].
//!
//! The core crate does the numerics; this crate reads and writes PNGs,
//! safetensors checkpoints, latent-code files and JSON manifests, resolves
//! assets, acquires eye regions and drives end-to-end runs.

pub mod assets;
pub mod checkpoint;
pub mod cli;
pub mod codes;
pub mod config;
pub mod diagnostic;
pub mod error;
pub mod eyes;
pub mod film;
pub mod io;
pub mod manifest;
pub mod run;
pub mod trace;

pub use error::RunError;
pub use rephoto_core as core;
