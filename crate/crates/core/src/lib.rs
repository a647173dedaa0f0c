//! Desk-scale deformable/rigid dynamics with convex frictional contact.
//!
//! Deformable bodies are linear tetrahedral finite elements with a
//! rotation-lagged corotational material whose stiffness is constant and
//! positive semidefinite within a step. Simple rigid elements (static
//! colliders and single-axis prismatic bodies) couple to them through
//! frictional contact and weld constraints. Each step solves one convex
//! optimization over the constrained degrees of freedom; the condensed
//! system matrix is harvested from the sparse Cholesky factorization that
//! the unconstrained update performs anyway.

pub mod constraints;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod material;
pub mod mesh;
pub mod scene;
pub mod shapes;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
