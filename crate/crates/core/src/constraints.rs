//! Contact detection and constraint assembly.
//!
//! Constraints couple bodies through 3-row blocks: contacts express the
//! relative velocity of a mesh vertex against a collider or a surface
//! triangle in a local frame (two tangents, then the normal), welds pin a
//! vertex to a world point or to a vertex of another body. Each block
//! carries a per-body sparse Jacobian, a bias velocity, and the cone its
//! impulse must live in; stacking the blocks yields the per-body sets of
//! vertex blocks that participate in the coupled solve.
//!
//! Detection is deterministic: bodies, boundary vertices, and colliders are
//! scanned in index order, and the stacked constraints are sorted by a
//! total order on their identities so a scene always produces the same
//! constraint list.

use nalgebra::{DMatrix, DVector, Vector3};
use std::collections::BTreeSet;

use crate::mesh::{vertex_position, BoundaryInfo, TetMesh};

/// Analytic collider geometry. Signed distance is negative inside.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Points with `normal . x < offset` are inside.
    HalfSpace { normal: Vector3<f64>, offset: f64 },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        center: Vector3<f64>,
        half_extents: Vector3<f64>,
    },
}

impl Shape {
    /// Signed distance and outward unit normal at `x`.
    pub fn signed_distance(&self, x: &Vector3<f64>) -> (f64, Vector3<f64>) {
        match self {
            Shape::HalfSpace { normal, offset } => (normal.dot(x) - offset, *normal),
            Shape::Sphere { center, radius } => {
                let d = x - center;
                let r = d.norm();
                if r <= 1e-14 * radius.max(1.0) {
                    // center point: any direction works; pick +z for determinism
                    (-radius, Vector3::z())
                } else {
                    (r - radius, d / r)
                }
            }
            Shape::Box {
                center,
                half_extents,
            } => {
                let p = x - center;
                let q = Vector3::new(
                    p.x.abs() - half_extents.x,
                    p.y.abs() - half_extents.y,
                    p.z.abs() - half_extents.z,
                );
                if q.x > 0.0 || q.y > 0.0 || q.z > 0.0 {
                    // outside: distance to the clamped surface point
                    let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0));
                    let dist = outside.norm();
                    let mut normal = Vector3::zeros();
                    for a in 0..3 {
                        normal[a] = outside[a] * p[a].signum();
                    }
                    (dist, normal / dist)
                } else {
                    // inside: nearest face, ties broken x then y then z
                    let mut axis = 0;
                    for a in 1..3 {
                        if q[a] > q[axis] {
                            axis = a;
                        }
                    }
                    let mut normal = Vector3::zeros();
                    normal[axis] = if p[axis] < 0.0 { -1.0 } else { 1.0 };
                    (q[axis], normal)
                }
            }
        }
    }

    /// The same shape displaced by `d`.
    pub fn translated(&self, d: &Vector3<f64>) -> Shape {
        match self {
            Shape::HalfSpace { normal, offset } => Shape::HalfSpace {
                normal: *normal,
                offset: offset + normal.dot(d),
            },
            Shape::Sphere { center, radius } => Shape::Sphere {
                center: center + d,
                radius: *radius,
            },
            Shape::Box {
                center,
                half_extents,
            } => Shape::Box {
                center: center + d,
                half_extents: *half_extents,
            },
        }
    }
}

/// Orthonormal tangent pair completing `n` to a right-handed frame
/// `(t1, t2, n)`. The helper axis is chosen from the largest component of
/// `n` (first of x, y, z on ties), so the basis is reproducible.
pub fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let mut k = 0;
    for a in 1..3 {
        if n[a].abs() > n[k].abs() {
            k = a;
        }
    }
    let mut helper = Vector3::zeros();
    helper[(k + 1) % 3] = 1.0;
    let t1 = (helper - n * helper.dot(n)).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// What a contact vertex is touching. Deformable counterparts carry the
/// boundary-face index so one vertex can hold several distinct contacts
/// against the same body (e.g. flush against two of its faces at once).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CounterpartId {
    Static(usize),
    Prismatic(usize),
    Deformable { body: usize, face: usize },
}

/// Stable identity of a constraint, used both for deterministic ordering
/// and as the warm-start key across steps. Welds sort before contacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ConstraintId {
    Weld { index: usize },
    Contact {
        body: usize,
        vertex: usize,
        against: CounterpartId,
    },
}

/// Feasible set for a 3-row impulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cone {
    /// `||gamma_t|| <= mu * gamma_n`, `gamma_n >= 0`.
    Friction { mu: f64 },
    /// Unconstrained (equality constraint rows).
    Bilateral,
}

/// One body's columns of a constraint Jacobian: a list of
/// `(vertex block index, 3 x block-size matrix)` entries.
#[derive(Debug, Clone)]
pub struct JacobianBlock {
    pub body: usize,
    pub entries: Vec<(usize, DMatrix<f64>)>,
}

/// A single 3-row constraint.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub id: ConstraintId,
    pub cone: Cone,
    pub blocks: Vec<JacobianBlock>,
    /// Bias velocity: the constraint penalizes `J v - v_hat`.
    pub v_hat: Vector3<f64>,
}

/// All constraints of a step plus the per-body participation footprint.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    pub constraints: Vec<ConstraintBlock>,
    /// Per body: vertex block indices touched by any constraint.
    pub participating: Vec<BTreeSet<usize>>,
}

impl ConstraintSet {
    pub fn total_rows(&self) -> usize {
        3 * self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }
}

/// Tunables for detection and constraint regularization.
#[derive(Debug, Clone, Copy)]
pub struct ContactParams {
    /// Activation distance: contacts form once `phi < margin`.
    pub margin: f64,
    /// Normal stiffness used for the regularization `R_n`.
    pub stiffness: f64,
    /// Dissipation time scale; `None` means "one time step".
    pub tau_d: Option<f64>,
    /// Tangential regularization scale relative to the Delassus weight.
    pub sigma: f64,
    /// Cap on the normal bias speed used to resolve penetration.
    pub v_hat_max: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams {
            margin: 1e-3,
            stiffness: 1e8,
            tau_d: None,
            sigma: 1e-3,
            v_hat_max: 0.1,
        }
    }
}

/// The counterpart side of a detected contact.
#[derive(Debug, Clone)]
pub enum Counterpart {
    Static,
    Prismatic { body: usize, axis: Vector3<f64> },
    Triangle {
        body: usize,
        vertices: [usize; 3],
        weights: [f64; 3],
    },
}

/// A detected proximity pair, before constraint assembly.
#[derive(Debug, Clone)]
pub struct ContactPair {
    pub id: ConstraintId,
    pub phi: f64,
    pub normal: Vector3<f64>,
    /// Combined friction coefficient (minimum of the two sides).
    pub mu: f64,
    pub body: usize,
    pub vertex: usize,
    pub counterpart: Counterpart,
}

/// A deformable body as seen by the detector.
pub struct DeformableView<'a> {
    pub body: usize,
    pub mesh: &'a TetMesh,
    pub boundary: &'a BoundaryInfo,
    pub q: &'a DVector<f64>,
    pub mu: f64,
}

/// A fixed collider.
pub struct StaticView<'a> {
    pub collider: usize,
    pub shape: &'a Shape,
    pub mu: f64,
}

/// A single-axis translating collider (one scalar velocity DoF).
pub struct PrismaticView<'a> {
    pub body: usize,
    pub shape: &'a Shape,
    pub axis: Vector3<f64>,
    /// Current travel along the axis.
    pub s: f64,
    pub mu: f64,
}

/// Scan all boundary vertices against colliders and other deformables.
///
/// Deformable-vs-deformable pairs are vertex-vs-surface-triangle, checked
/// in both directions; a vertex may pair with several faces of the same
/// body (one per distinct touching direction, plus its entry face when
/// penetrating).
pub fn detect_contacts(
    deformables: &[DeformableView],
    statics: &[StaticView],
    prismatics: &[PrismaticView],
    params: &ContactParams,
) -> Vec<ContactPair> {
    let mut pairs = Vec::new();
    for d in deformables {
        for &v in d.boundary.surface_vertices() {
            let x = vertex_position(d.q, v);
            for s in statics {
                let (phi, normal) = s.shape.signed_distance(&x);
                if phi < params.margin {
                    pairs.push(ContactPair {
                        id: ConstraintId::Contact {
                            body: d.body,
                            vertex: v,
                            against: CounterpartId::Static(s.collider),
                        },
                        phi,
                        normal,
                        mu: d.mu.min(s.mu),
                        body: d.body,
                        vertex: v,
                        counterpart: Counterpart::Static,
                    });
                }
            }
            for p in prismatics {
                let shape = p.shape.translated(&(p.axis * p.s));
                let (phi, normal) = shape.signed_distance(&x);
                if phi < params.margin {
                    pairs.push(ContactPair {
                        id: ConstraintId::Contact {
                            body: d.body,
                            vertex: v,
                            against: CounterpartId::Prismatic(p.body),
                        },
                        phi,
                        normal,
                        mu: d.mu.min(p.mu),
                        body: d.body,
                        vertex: v,
                        counterpart: Counterpart::Prismatic {
                            body: p.body,
                            axis: p.axis,
                        },
                    });
                }
            }
            for other in deformables {
                if other.body == d.body {
                    continue;
                }
                vertex_vs_surface(d, v, &x, other, params, &mut pairs);
            }
        }
    }
    pairs
}

/// True when `x` lies inside (or on the boundary of) any tetrahedron of
/// `other` in its current configuration.
fn point_inside_body(x: &Vector3<f64>, other: &DeformableView) -> bool {
    'elems: for elem in other.mesh.elements() {
        let p: [Vector3<f64>; 4] = [
            vertex_position(other.q, elem[0]),
            vertex_position(other.q, elem[1]),
            vertex_position(other.q, elem[2]),
            vertex_position(other.q, elem[3]),
        ];
        let vol6 = (p[1] - p[0]).cross(&(p[2] - p[0])).dot(&(p[3] - p[0]));
        if vol6.abs() <= 1e-30 {
            continue;
        }
        // the triples are outward faces of a positively oriented element:
        // x is inside when it sits on the inner side of all four planes
        for rest in [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]] {
            let (a, b, c) = (p[rest[0]], p[rest[1]], p[rest[2]]);
            let side = (b - a).cross(&(c - a)).dot(&(x - a)) / vol6;
            if side > 1e-9 {
                continue 'elems;
            }
        }
        return true;
    }
    false
}

/// Test one vertex against every boundary triangle of `other` and append a
/// pair for each face it is in contact through.
///
/// Two kinds of pair are emitted. Surface-band pairs cover a vertex on or
/// near a face from the outside (plane distance in `[-tol, margin)` and the
/// nearest triangle point within the margin); a vertex flush against two
/// faces at once — e.g. resting in a corner, or on a joint seam shared with
/// a side plane — gets one pair per distinct face direction, so every
/// touching surface can resist from the first step. An exit pair covers a
/// vertex behind a face plane while inside the body: it pairs with the
/// nearest such face by true point-to-triangle distance (the minimal exit),
/// so a deep vertex resolves through the surface it entered, not the far
/// side. The exit pair is emitted only when that distance is a real
/// penetration depth (within the margin) or when the vertex has no surface
/// contact left at all (tunneled past the band in one step); a vertex flush
/// on a seam is otherwise covered by its band pairs alone and must not be
/// paired across the body's interior.
fn vertex_vs_surface(
    d: &DeformableView,
    v: usize,
    x: &Vector3<f64>,
    other: &DeformableView,
    params: &ContactParams,
    pairs: &mut Vec<ContactPair>,
) {
    // Plane-side tolerance: vertices meant to lie exactly on a neighbour's
    // face plane (shared seams) land within rounding noise of it, and must
    // count as touching, not penetrating.
    const TOL: f64 = 1e-9;
    let inside = point_inside_body(x, other);
    // face index, phi, normal, face vertices, witness weights
    type Candidate = (usize, f64, Vector3<f64>, [usize; 3], [f64; 3]);
    let mut band: Vec<Candidate> = Vec::new();
    let mut exit: Option<(f64, Candidate)> = None;
    for (f, face) in other.boundary.surface_faces().iter().enumerate() {
        let a = vertex_position(other.q, face[0]);
        let b = vertex_position(other.q, face[1]);
        let c = vertex_position(other.q, face[2]);
        let cross = (b - a).cross(&(c - a));
        let double_area = cross.norm();
        if double_area <= 1e-30 {
            continue;
        }
        let n = cross / double_area;
        let phi = n.dot(&(x - a));
        if phi >= -TOL {
            // In front of the face plane: active only if the triangle
            // itself (not just its plane) is within the margin.
            if phi < params.margin {
                let (dist2, w) = point_triangle_closest(x, &a, &b, &c);
                if dist2 < params.margin * params.margin {
                    band.push((f, phi, n, *face, w));
                }
            }
        } else if inside {
            // Candidate exit face for a penetrated vertex.
            let (dist2, w) = point_triangle_closest(x, &a, &b, &c);
            if exit.as_ref().map_or(true, |&(bd, _)| dist2 < bd) {
                exit = Some((dist2, (f, -dist2.sqrt(), n, *face, w)));
            }
        }
    }
    let fully_submerged = band.is_empty();
    // Coplanar triangles sharing an edge or vertex would produce duplicate
    // rows; keep the nearest face per distinct normal direction.
    band.sort_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)));
    let mut kept: Vec<Candidate> = Vec::new();
    for cand in band {
        if kept.iter().all(|k| k.2.dot(&cand.2) < 1.0 - 1e-9) {
            kept.push(cand);
        }
    }
    if let Some((dist2, cand)) = exit {
        if dist2 < params.margin * params.margin || fully_submerged {
            kept.push(cand);
        }
    }
    for (f, phi, normal, vertices, weights) in kept {
        pairs.push(ContactPair {
            id: ConstraintId::Contact {
                body: d.body,
                vertex: v,
                against: CounterpartId::Deformable {
                    body: other.body,
                    face: f,
                },
            },
            phi,
            normal,
            mu: d.mu.min(other.mu),
            body: d.body,
            vertex: v,
            counterpart: Counterpart::Triangle {
                body: other.body,
                vertices,
                weights,
            },
        });
    }
}

/// Squared distance from `p` to triangle `abc` and the barycentric weights
/// of the closest point (clamped to the triangle).
fn point_triangle_closest(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (f64, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ((p - a).norm_squared(), [1.0, 0.0, 0.0]);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ((p - b).norm_squared(), [0.0, 1.0, 0.0]);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (((p - a) - ab * t).norm_squared(), [1.0 - t, t, 0.0]);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ((p - c).norm_squared(), [0.0, 0.0, 1.0]);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (((p - a) - ac * t).norm_squared(), [1.0 - t, 0.0, t]);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (((p - b) - (c - b) * t).norm_squared(), [0.0, 1.0 - t, t]);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (
        ((p - a) - ab * v - ac * w).norm_squared(),
        [1.0 - v - w, v, w],
    )
}

fn frame_rows(t1: &Vector3<f64>, t2: &Vector3<f64>, n: &Vector3<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(3, 3);
    for c in 0..3 {
        m[(0, c)] = t1[c];
        m[(1, c)] = t2[c];
        m[(2, c)] = n[c];
    }
    m
}

/// Build the 3-row constraint for a detected pair.
///
/// Rows map body velocities to the contact-frame relative velocity
/// `(v . t1, v . t2, v . n)` of the vertex against its counterpart. The
/// bias asks the normal velocity to remove the penetration over one step,
/// capped at `v_hat_max`.
pub fn contact_constraint(pair: &ContactPair, params: &ContactParams, dt: f64) -> ConstraintBlock {
    let (t1, t2) = tangent_basis(&pair.normal);
    let frame = frame_rows(&t1, &t2, &pair.normal);
    let mut blocks = vec![JacobianBlock {
        body: pair.body,
        entries: vec![(pair.vertex, frame.clone())],
    }];
    match &pair.counterpart {
        Counterpart::Static => {}
        Counterpart::Prismatic { body, axis } => {
            // counterpart point moves at s_dot * axis
            let col = DMatrix::from_column_slice(
                3,
                1,
                &[-t1.dot(axis), -t2.dot(axis), -pair.normal.dot(axis)],
            );
            blocks.push(JacobianBlock {
                body: *body,
                entries: vec![(0, col)],
            });
        }
        Counterpart::Triangle {
            body,
            vertices,
            weights,
        } => {
            let entries = vertices
                .iter()
                .zip(weights)
                .map(|(&vi, &wi)| (vi, &frame * -wi))
                .collect();
            blocks.push(JacobianBlock {
                body: *body,
                entries,
            });
        }
    }
    let v_hat_n = (-pair.phi / dt).min(params.v_hat_max);
    ConstraintBlock {
        id: pair.id,
        cone: Cone::Friction { mu: pair.mu },
        blocks,
        v_hat: Vector3::new(0.0, 0.0, v_hat_n),
    }
}

/// Where a weld anchors.
#[derive(Debug, Clone, Copy)]
pub enum WeldTarget {
    World(Vector3<f64>),
    BodyVertex { body: usize, vertex: usize },
}

/// Declaration of a weld: a vertex of one body pinned to a target.
#[derive(Debug, Clone, Copy)]
pub struct WeldSpec {
    pub body: usize,
    pub vertex: usize,
    pub target: WeldTarget,
}

/// Build the 3-row equality constraint for a weld. `x_a` is the welded
/// vertex's current position and `target_pos` the anchor's; the bias drives
/// the gap to zero over one step.
pub fn weld_constraint(
    index: usize,
    spec: &WeldSpec,
    x_a: &Vector3<f64>,
    target_pos: &Vector3<f64>,
    dt: f64,
) -> ConstraintBlock {
    let mut blocks = vec![JacobianBlock {
        body: spec.body,
        entries: vec![(spec.vertex, DMatrix::identity(3, 3))],
    }];
    if let WeldTarget::BodyVertex { body, vertex } = spec.target {
        blocks.push(JacobianBlock {
            body,
            entries: vec![(vertex, -DMatrix::identity(3, 3))],
        });
    }
    ConstraintBlock {
        id: ConstraintId::Weld { index },
        cone: Cone::Bilateral,
        blocks,
        v_hat: -(x_a - target_pos) / dt,
    }
}

/// Sort constraints into their canonical order and record, per body, which
/// vertex blocks any constraint touches.
pub fn stack_constraints(mut constraints: Vec<ConstraintBlock>, n_bodies: usize) -> ConstraintSet {
    constraints.sort_by_key(|c| c.id);
    let mut participating = vec![BTreeSet::new(); n_bodies];
    for c in &constraints {
        for b in &c.blocks {
            for (block, _) in &b.entries {
                participating[b.body].insert(*block);
            }
        }
    }
    ConstraintSet {
        constraints,
        participating,
    }
}
