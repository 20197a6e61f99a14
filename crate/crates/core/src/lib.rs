//! Desk-scale flow-matching video frame interpolation.
//!
//! A miniature diffusion transformer trained from scratch on procedurally
//! generated clips, with temporally concatenated boundary-frame references,
//! per-frame timestep (fidelity) modulation, a temporal difference loss and
//! a matching-lines control branch. Everything runs on a small hand-rolled
//! tensor library with reverse-mode autodiff so gradients can be vetted
//! against finite differences end to end.

pub mod data;
pub mod error;
pub mod lines;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
