//! Category-level garment smoothing with a feature-conditioned bimanual
//! value network, trained and evaluated against a desk-scale deformable
//! cloth simulator.

pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod pointnet;
pub mod sim;
pub mod tensor;

pub use error::{FcbvError, Result};
