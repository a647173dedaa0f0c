//! Procedural tetrahedral meshes: unit primitives, box lattices, and the
//! curved blocks used by the arch scene.

use nalgebra::Vector3;

/// One positively oriented unit tetrahedron.
pub fn unit_tet() -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    (
        vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ],
        vec![[0, 1, 2, 3]],
    )
}

/// Unit cube split into five tets: four corner tets at odd-parity corners
/// plus the central octahedral tet.
pub fn five_tet_cube() -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    let vertices: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            Vector3::new(
                (i & 1) as f64,
                ((i >> 1) & 1) as f64,
                ((i >> 2) & 1) as f64,
            )
        })
        .collect();
    let raw = [
        [1usize, 0, 3, 5],
        [2, 0, 6, 3],
        [4, 0, 5, 6],
        [7, 3, 6, 5],
        [0, 3, 5, 6],
    ];
    let mut elements = Vec::new();
    for mut t in raw {
        fix_orientation(&vertices, &mut t);
        elements.push(t);
    }
    (vertices, elements)
}

fn fix_orientation(vertices: &[Vector3<f64>], t: &mut [usize; 4]) {
    let d1 = vertices[t[1]] - vertices[t[0]];
    let d2 = vertices[t[2]] - vertices[t[0]];
    let d3 = vertices[t[3]] - vertices[t[0]];
    if d1.cross(&d2).dot(&d3) < 0.0 {
        t.swap(2, 3);
    }
}

/// Structured grid of `(nx+1)(ny+1)(nz+1)` points mapped through `map`,
/// each cell split into six tets around the main diagonal. The split is
/// identical in every cell, so neighboring cells share faces exactly.
pub fn lattice_tets(
    dims: [usize; 3],
    map: impl Fn(usize, usize, usize) -> Vector3<f64>,
) -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = dims;
    assert!(nx > 0 && ny > 0 && nz > 0);
    let idx = |i: usize, j: usize, k: usize| (k * (ny + 1) + j) * (nx + 1) + i;
    let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(map(i, j, k));
            }
        }
    }
    // six tets per cell: walk the cube diagonal through each axis
    // permutation of unit steps
    const PERMS: [[usize; 3]; 6] = [
        [0, 1, 2],
        [0, 2, 1],
        [1, 0, 2],
        [1, 2, 0],
        [2, 0, 1],
        [2, 1, 0],
    ];
    let mut elements = Vec::with_capacity(6 * nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                for perm in &PERMS {
                    let mut corner = [i, j, k];
                    let mut path = [idx(i, j, k), 0, 0, 0];
                    for (step, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        path[step + 1] = idx(corner[0], corner[1], corner[2]);
                    }
                    let mut t = path;
                    fix_orientation(&vertices, &mut t);
                    elements.push(t);
                }
            }
        }
    }
    (vertices, elements)
}

/// Axis-aligned box lattice with the minimum corner at the origin.
pub fn cube_lattice(divisions: [usize; 3], size: [f64; 3]) -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = divisions;
    lattice_tets(divisions, |i, j, k| {
        Vector3::new(
            size[0] * i as f64 / nx as f64,
            size[1] * j as f64 / ny as f64,
            size[2] * k as f64 / nz as f64,
        )
    })
}

/// Curved arch block: the annular sector between `r_inner` and `r_outer`
/// spanning `[angle0, angle1]` in the xz plane (angle measured from +x
/// toward +z), extruded along y by `depth`. Grid resolution is
/// `(angular, depth, radial)` cells.
pub fn arch_voussoir(
    r_inner: f64,
    r_outer: f64,
    angle0: f64,
    angle1: f64,
    depth: f64,
    divisions: [usize; 3],
) -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    let [na, nd, nr] = divisions;
    lattice_tets(divisions, |i, j, k| {
        let phi = angle0 + (angle1 - angle0) * i as f64 / na as f64;
        let y = depth * j as f64 / nd as f64;
        let r = r_inner + (r_outer - r_inner) * k as f64 / nr as f64;
        Vector3::new(r * phi.cos(), y, r * phi.sin())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_element_geometry, TetMesh};

    #[test]
    fn five_tet_cube_fills_unit_volume() {
        let (v, e) = five_tet_cube();
        assert_eq!(v.len(), 8);
        assert_eq!(e.len(), 5);
        let mesh = TetMesh::new(v, e, 1.0).unwrap();
        let geom = build_element_geometry(&mesh).unwrap();
        assert!((geom.total_volume() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lattice_is_conforming_and_fills_volume() {
        let (v, e) = cube_lattice([3, 2, 2], [1.5, 1.0, 0.8]);
        assert_eq!(v.len(), 4 * 3 * 3);
        assert_eq!(e.len(), 6 * 3 * 2 * 2);
        let mesh = TetMesh::new(v, e, 1.0).unwrap();
        let geom = build_element_geometry(&mesh).unwrap();
        assert!((geom.total_volume() - 1.5 * 1.0 * 0.8).abs() < 1e-12);
        // conforming = every interior face shared by exactly two tets, which
        // extract_boundary verifies by not erroring and by closure
        let b = crate::mesh::extract_boundary(&mesh).unwrap();
        let expected_surface = 2 * (2 * (3 * 2) + 2 * (3 * 2) + 2 * (2 * 2));
        assert_eq!(b.surface_faces().len(), expected_surface);
    }

    #[test]
    fn voussoir_volume_matches_sector() {
        let (ri, ro, a0, a1, d) = (0.2, 0.26, 0.1, 0.4, 0.05);
        let (v, e) = arch_voussoir(ri, ro, a0, a1, d, [6, 2, 4]);
        let mesh = TetMesh::new(v, e, 1.0).unwrap();
        let geom = build_element_geometry(&mesh).unwrap();
        let exact = 0.5 * (ro * ro - ri * ri) * (a1 - a0) * d;
        // linear tets underestimate the curved sector slightly
        assert!((geom.total_volume() - exact).abs() < 0.01 * exact);
    }
}
