//! Arbitrary-scale stereo super-resolution with an implicit neural
//! representation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod disparity;
pub mod dgasu;
pub mod encoder;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod params;
pub mod training;

pub use error::{Error, Result};

/// One side of a rectified stereo rig.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> View {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }
}
