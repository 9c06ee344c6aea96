//! Semantic volumetric fusion engine: RGB-D sequences plus per-frame
//! class-probability maps go in; a labeled 3D mesh, refined label
//! distributions, and semantic ray-cast answers come out.
//!
//! Pipeline stages, bottom to top:
//! - [`geometry`]: camera models, poses, back-projection, normal maps
//! - [`tsdf`]: truncated-signed-distance fusion, surface prediction,
//!   mesh extraction
//! - [`tracking`]: frame-to-model point-to-plane ICP
//! - [`semantic_fusion`]: per-voxel Bayesian label updates
//! - [`crf3d`]: mean-field label refinement over mesh vertices
//! - [`query`]: octree-accelerated semantic ray casting and material
//!   response lookup
//! - [`eval`]: confusion matrices and segmentation metrics
//! - [`synth`]: synthetic RGB-D + semantics generator used as the
//!   ground-truth oracle in tests
//! - [`config`] and [`pipeline`]: run configuration and the end-to-end
//!   drivers shared by the command-line tool

pub mod config;
pub mod crf3d;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod query;
pub mod semantic_fusion;
pub mod synth;
pub mod tracking;
pub mod tsdf;

pub use error::{Error, Result};
