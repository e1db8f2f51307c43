//! Channel-with-cylinder meshing and Taylor-Hood (P2/P1) finite elements:
//! mesh generation, function spaces, operator assembly, and the boundary
//! force functional on the cylinder.

mod assemble;
mod delaunay;
mod geometry;
mod mesh;
mod quadrature;
mod space;

pub use assemble::{
    assemble_convection, assemble_convection_full, assemble_operators, compute_forces,
    AssembledOperators, ForceSample,
};
pub use geometry::ChannelGeometry;
pub use mesh::{generate_channel_mesh, generate_rectangle_mesh, BoundaryTag, Mesh};
pub use quadrature::{edge_rule, triangle_rule};
pub use space::{p2_grad, p2_shape, ElementGeom, FemSpace, TriLocator};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("input rejected: {0}")]
    RejectedInput(String),
    #[error("degenerate triangle {0} (area {1:.3e})")]
    DegenerateTriangle(usize, f64),
    #[error("mesh invariant violated: {0}")]
    InvalidMesh(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("parse error at line {0}: {1}")]
    Parse(usize, String),
}
