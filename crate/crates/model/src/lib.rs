//! Generative models for structural floorplan graphs: a diffusion denoiser
//! that places wall junctions, an edge classifier that connects them, and the
//! constraint encoders (boundary image, room topology) that condition both.

pub mod align;
pub mod blocks;
pub mod constraints;
pub mod diffusion;
pub mod edge_pred;
pub mod error;
pub mod node_gen;

pub use error::{ModelError, ModelResult};
