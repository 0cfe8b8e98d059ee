//! VoV3D: spatiotemporal video classification with one-shot temporal
//! aggregation over depthwise (2+1)D blocks.

pub mod analysis;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Rng, Shape5, Tensor5};
