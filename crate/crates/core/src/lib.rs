//! Divide-and-conquer spatiotemporal geometry model at desk scale.

pub mod error;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod heads;
pub mod losses;
pub mod numerics;
pub mod pipeline;
pub mod scenes;

pub use error::{Error, Result};
