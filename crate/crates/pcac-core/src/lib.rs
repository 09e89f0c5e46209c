//! Learned lossy attribute coding for dynamic voxelized point clouds.
//!
//! A sparse-convolutional autoencoder maps per-frame RGB attributes to a
//! quantized latent at stride 8. A spatiotemporal context model predicts a
//! Gaussian for every latent element from already-coded elements of the
//! same frame and from the previous frame's latent, and a range coder turns
//! those predictions into a bitstream. Geometry is assumed to be known
//! losslessly on both sides.

pub mod autodiff;
pub mod bitstream;
pub mod context;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod network;
pub mod pointcloud;
pub mod range_coder;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
