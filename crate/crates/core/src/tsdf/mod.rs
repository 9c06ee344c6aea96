//! Volumetric fusion: a dense truncated-signed-distance grid that frames
//! are averaged into, surface prediction by ray marching, and triangle
//! mesh extraction carrying color and class probabilities per vertex.

pub mod marching;
pub mod mesh;
pub mod raycast;
pub mod volume;

pub use marching::extract_mesh;
pub use mesh::SemanticMesh;
pub use raycast::raycast_surface;
pub use volume::TsdfVolume;
