//! Tetrahedral meshes and the per-element quantities the stepper consumes.
//!
//! Elements are linear tets. Shape-function gradients are constant per
//! element, so the deformation gradient is a linear map of the stacked
//! vertex positions and the stiffness assembly can reuse cached gradients.

use crate::error::{Error, Result};
use crate::sparse::BlockSparseSym;
use nalgebra::{DVector, Matrix3, Vector3};
use std::collections::HashMap;

/// Immutable tetrahedral mesh with reference positions and a mass density.
#[derive(Debug, Clone)]
pub struct TetMesh {
    vertices: Vec<Vector3<f64>>,
    elements: Vec<[usize; 4]>,
    density: f64,
}

impl TetMesh {
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        elements: Vec<[usize; 4]>,
        density: f64,
    ) -> Result<Self> {
        if !(density > 0.0) {
            return Err(Error::NonPositiveDensity(density));
        }
        for (e, elem) in elements.iter().enumerate() {
            for &v in elem {
                if v >= vertices.len() {
                    return Err(Error::VertexIndexOutOfRange {
                        element: e,
                        vertex: v,
                        n_vertices: vertices.len(),
                    });
                }
            }
        }
        Ok(TetMesh {
            vertices,
            elements,
            density,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn n_dofs(&self) -> usize {
        3 * self.vertices.len()
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    /// Stacked reference positions as a configuration vector.
    pub fn rest_configuration(&self) -> DVector<f64> {
        let mut q = DVector::zeros(self.n_dofs());
        for (i, v) in self.vertices.iter().enumerate() {
            q.fixed_rows_mut::<3>(3 * i).copy_from(v);
        }
        q
    }

    /// Diagonal of the reference bounding box; the length scale for
    /// degeneracy tolerances.
    pub fn bounding_box_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (hi - lo).norm()
    }
}

/// Vertex position `i` out of a configuration vector.
pub fn vertex_position(q: &DVector<f64>, i: usize) -> Vector3<f64> {
    Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2])
}

/// Cached per-element reference quantities: inverse edge matrices, volumes,
/// and constant shape-function gradients.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    dm_inv: Vec<Matrix3<f64>>,
    volumes: Vec<f64>,
    grads: Vec<[Vector3<f64>; 4]>,
    total_volume: f64,
}

impl ElementGeometry {
    pub fn dm_inv(&self, e: usize) -> &Matrix3<f64> {
        &self.dm_inv[e]
    }

    pub fn volume(&self, e: usize) -> f64 {
        self.volumes[e]
    }

    /// Constant shape-function gradients of element `e`; gradient `m` scales
    /// vertex `m`'s contribution to the deformation gradient, and the four
    /// gradients of an element sum to zero.
    pub fn grads(&self, e: usize) -> &[Vector3<f64>; 4] {
        &self.grads[e]
    }

    pub fn total_volume(&self) -> f64 {
        self.total_volume
    }
}

/// Precompute element geometry. Rejects inverted elements and elements whose
/// reference volume is degenerate relative to the mesh scale.
pub fn build_element_geometry(mesh: &TetMesh) -> Result<ElementGeometry> {
    let diag = mesh.bounding_box_diagonal();
    let tol = 1e-14 * diag * diag * diag;
    let n = mesh.n_elements();
    let mut dm_inv = Vec::with_capacity(n);
    let mut volumes = Vec::with_capacity(n);
    let mut grads = Vec::with_capacity(n);
    let mut total = 0.0;
    for (e, elem) in mesh.elements().iter().enumerate() {
        let x = |m: usize| mesh.vertices()[elem[m]];
        let dm = Matrix3::from_columns(&[x(1) - x(0), x(2) - x(0), x(3) - x(0)]);
        let det = dm.determinant();
        if det.abs() < tol {
            return Err(Error::DegenerateElement { element: e, det, tol });
        }
        if det < 0.0 {
            return Err(Error::InvertedElement { element: e, det });
        }
        let inv = dm.try_inverse().ok_or(Error::DegenerateElement {
            element: e,
            det,
            tol,
        })?;
        // rows of Dm^-1 are the gradients of vertices 1..3; vertex 0 closes
        // the partition of unity
        let g1 = Vector3::new(inv[(0, 0)], inv[(0, 1)], inv[(0, 2)]);
        let g2 = Vector3::new(inv[(1, 0)], inv[(1, 1)], inv[(1, 2)]);
        let g3 = Vector3::new(inv[(2, 0)], inv[(2, 1)], inv[(2, 2)]);
        let g0 = -(g1 + g2 + g3);
        let vol = det / 6.0;
        total += vol;
        dm_inv.push(inv);
        volumes.push(vol);
        grads.push([g0, g1, g2, g3]);
    }
    Ok(ElementGeometry {
        dm_inv,
        volumes,
        grads,
        total_volume: total,
    })
}

/// Deformation gradient of element `e` at configuration `q`.
pub fn deformation_gradient(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    e: usize,
    q: &DVector<f64>,
) -> Matrix3<f64> {
    let elem = &mesh.elements()[e];
    let g = geom.grads(e);
    let mut f = Matrix3::zeros();
    for m in 0..4 {
        let x = vertex_position(q, elem[m]);
        f += x * g[m].transpose();
    }
    f
}

/// Shared block pattern for matrices assembled over mesh connectivity:
/// a 3x3 block per vertex, off-diagonal blocks wherever two vertices share
/// an element.
pub fn vertex_block_pattern(mesh: &TetMesh) -> BlockSparseSym {
    BlockSparseSym::zeros(vec![3; mesh.n_vertices()])
}

/// Consistent mass matrix of linear tets: each element contributes
/// `rho V / 20 * (1 + delta_mn)` per axis to vertex pair `(m, n)`. Row sums
/// per axis equal the element mass, so translation momentum is exact.
pub fn assemble_mass_matrix(mesh: &TetMesh, geom: &ElementGeometry) -> BlockSparseSym {
    let mut mass = vertex_block_pattern(mesh);
    let rho = mesh.density();
    for (e, elem) in mesh.elements().iter().enumerate() {
        let scale = rho * geom.volume(e) / 20.0;
        for m in 0..4 {
            for n in 0..=m {
                let coeff = scale * if m == n { 2.0 } else { 1.0 };
                let block = nalgebra::DMatrix::identity(3, 3) * coeff;
                mass.add_block(elem[m], elem[n], &block);
            }
        }
    }
    mass
}

/// Row-sum lumped variant: `rho V / 4` per incident vertex, diagonal only.
pub fn assemble_lumped_mass_matrix(mesh: &TetMesh, geom: &ElementGeometry) -> BlockSparseSym {
    let mut mass = vertex_block_pattern(mesh);
    let rho = mesh.density();
    for (e, elem) in mesh.elements().iter().enumerate() {
        let coeff = rho * geom.volume(e) / 4.0;
        let block = nalgebra::DMatrix::identity(3, 3) * coeff;
        for m in 0..4 {
            mass.add_block(elem[m], elem[m], &block);
        }
    }
    mass
}

/// Surface topology: outward-oriented boundary triangles and the set of
/// vertices on them.
#[derive(Debug, Clone)]
pub struct BoundaryInfo {
    surface_vertices: Vec<usize>,
    surface_faces: Vec<[usize; 3]>,
}

impl BoundaryInfo {
    pub fn surface_vertices(&self) -> &[usize] {
        &self.surface_vertices
    }

    pub fn surface_faces(&self) -> &[[usize; 3]] {
        &self.surface_faces
    }
}

/// Extract boundary faces: faces incident to exactly one element, oriented
/// outward. Errors if any face is shared by more than two elements.
pub fn extract_boundary(mesh: &TetMesh) -> Result<BoundaryInfo> {
    // outward-facing vertex orderings for a positively oriented tet
    const FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]];
    let mut seen: HashMap<[usize; 3], (usize, [usize; 3])> = HashMap::new();
    for elem in mesh.elements() {
        for f in &FACES {
            let oriented = [elem[f[0]], elem[f[1]], elem[f[2]]];
            let mut key = oriented;
            key.sort_unstable();
            match seen.get_mut(&key) {
                Some((count, _)) => {
                    *count += 1;
                    if *count > 2 {
                        return Err(Error::NonManifold { face: key });
                    }
                }
                None => {
                    seen.insert(key, (1, oriented));
                }
            }
        }
    }
    let mut faces: Vec<[usize; 3]> = seen
        .values()
        .filter(|(count, _)| *count == 1)
        .map(|(_, oriented)| *oriented)
        .collect();
    faces.sort_unstable();
    let mut verts: Vec<usize> = faces.iter().flatten().copied().collect();
    verts.sort_unstable();
    verts.dedup();
    Ok(BoundaryInfo {
        surface_vertices: verts,
        surface_faces: faces,
    })
}
