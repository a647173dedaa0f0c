//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("element {element}: degenerate reference tetrahedron (det {det:.3e} below tolerance {tol:.3e})")]
    DegenerateElement { element: usize, det: f64, tol: f64 },

    #[error("element {element}: inverted reference tetrahedron (det {det:.3e})")]
    InvertedElement { element: usize, det: f64 },

    #[error("element {element} references vertex {vertex}, but the mesh has {n_vertices} vertices")]
    VertexIndexOutOfRange {
        element: usize,
        vertex: usize,
        n_vertices: usize,
    },

    #[error("density must be positive, got {0}")]
    NonPositiveDensity(f64),

    #[error("face {face:?} is shared by more than two elements; the mesh is not manifold")]
    NonManifold { face: [usize; 3] },

    #[error("invalid material parameters: {0}")]
    InvalidMaterial(String),

    #[error("deformation gradient inverted or near-singular (det {det:.3e})")]
    Inverted { det: f64 },

    #[error("polar iteration failed to converge (residual {residual:.3e})")]
    PolarNonConvergence { residual: f64 },

    #[error("matrix not positive definite: non-positive pivot at dof {dof} (block {block})")]
    NonPositivePivot { block: usize, dof: usize },

    #[error("contact solve did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    SolverNonConvergence { iterations: usize, grad_norm: f64 },

    #[error("scene error at {pointer}: {message}")]
    Scene { pointer: String, message: String },

    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
