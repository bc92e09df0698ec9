//! City-scale static environment priors from posed camera imagery.
//!
//! The pipeline runs in stages that each map onto one module:
//!
//! * [`dataset`] loads posed frames with precomputed semantic feature maps and
//!   masks, generates camera rays and synthesizes analytic test scenes.
//! * [`partition`] splits camera positions into tiles and places sub-field
//!   centroids inside every tile with K-Means.
//! * [`field`] is the neural scene representation: multi-resolution hash grids,
//!   small MLPs, a sky model and per-video embeddings, with hand-written
//!   reverse-mode gradients.
//! * [`render`] samples rays (uniform plus two proposal stages), routes samples
//!   to the nearest sub-field and composites color and features.
//! * [`train`] holds the five-term loss, AdamW and the tile training loop.
//! * [`extract`] marches rays to find surfaces, downsamples them into a sparse
//!   voxel prior and persists it.
//! * [`integrate`] rasterizes queried prior voxels into BEV / 3D grids and
//!   fuses them with online features.

pub mod bench;
pub mod config;
pub mod dataset;
pub mod error;
pub mod extract;
pub mod field;
pub mod geometry;
pub mod integrate;
mod linalg;
pub mod partition;
pub mod pipeline;
pub mod render;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{Aabb, Vec3};
