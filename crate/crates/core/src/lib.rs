//! Style-preserving face pose editing at desk scale.
//!
//! A source face is aligned to a target pose by a similarity transform on
//! its exposed half, warped pixel-by-pixel by a learned dense sampling map,
//! and finally repaired by a conditional inpainting GAN. Everything runs on
//! procedurally rendered synthetic faces with exact landmarks.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod synthdata;

pub use error::{Error, Result};
pub use image::Image;
