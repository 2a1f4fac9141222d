//! Multiresolution deep implicit functions on procedurally generated shapes.
//!
//! A shape's truncated signed distance field is encoded into a hierarchy of
//! latent grids. Level 0 holds one global code decoded into a coarse SDF;
//! every finer level decodes a residual that is added on top. The same
//! decoders support one-pass encoder inference and decoder-only latent
//! optimization, including completion from a single depth image.

pub mod error;
pub mod io;
pub mod kernel;
pub mod latent;
pub mod latopt;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod sdf;

pub use error::{Error, Result};

/// Half side length of the world box `[-0.64, 0.64]³`.
pub const BOX_HALF: f64 = 0.64;

/// Ground-truth SDF values are clamped to `[-TRUNCATION, TRUNCATION]`.
pub const TRUNCATION: f64 = 0.05;
