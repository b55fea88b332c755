//! Simulation, reconstruction and learned post-processing for EIT-based
//! hemorrhagic stroke monitoring.

pub mod artifact;
pub mod datagen;
pub mod error;
pub mod fem;
pub mod field;
pub mod gunet;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod recon;

pub use error::{Error, ErrorKind, Result};
pub use field::ConductivityField;
pub use mesh::{extract_graph, generate_head_mesh, Graph, HeadGeometrySpec, LayerTag, Mesh, MeshDensity};
