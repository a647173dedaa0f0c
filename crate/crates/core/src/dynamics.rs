//! Time stepping: free motion per body, one coupled constraint solve, and a
//! staged commit.
//!
//! Each step follows the same pipeline:
//!
//! 1. refresh the lagged per-element rotations from the current positions;
//! 2. build per-body artifacts — mass, stiffness, external force — under
//!    which the discrete momentum residual is affine in the next velocity;
//! 3. detect contacts and stack them with the welds;
//! 4. factorize each body's tangent with the participating blocks ordered
//!    last, which yields the free-motion velocity and, as a by-product of
//!    the same factorization, the dense condensed tangent on the
//!    participating DoFs;
//! 5. solve the coupled convex problem on those DoFs;
//! 6. propagate the correction back to the non-participating DoFs through
//!    the stored factor, update positions, and commit.
//!
//! Nothing mutates until the whole step succeeds, so a solver failure
//! leaves the world exactly as it was.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::constraints::{
    contact_constraint, detect_contacts, stack_constraints, weld_constraint, ConstraintBlock,
    ConstraintId, ContactParams, DeformableView, PrismaticView, Shape, StaticView, WeldSpec,
    WeldTarget,
};
use crate::error::Result;
use crate::material::{
    damping_force, elastic_energy, elastic_force_and_stiffness, update_lagged_rotation,
    LameParams, MaterialState, RayleighParams,
};
use crate::mesh::{
    assemble_mass_matrix, build_element_geometry, extract_boundary, vertex_position, BoundaryInfo,
    ElementGeometry, TetMesh,
};
use crate::solver::{
    check_optimality, solve_reduced, OptimalityReport, ReducedProblem, SolverParams,
};
use crate::sparse::{
    factorize_with_schur_jitter, order_within_partitions, BlockSparseSym, CholeskyWithSchur,
};

/// Integration scheme: `theta` blends the force evaluation point between
/// the step's endpoints (1 = fully implicit), `theta_vq` blends which
/// velocity advances positions (1 = the new one).
#[derive(Debug, Clone, Copy)]
pub struct SchemeParams {
    pub theta: f64,
    pub theta_vq: f64,
    pub dt: f64,
}

impl SchemeParams {
    /// Backward Euler: forces at the end of the step, positions advanced
    /// by the new velocity.
    pub fn implicit_euler(dt: f64) -> Self {
        SchemeParams {
            theta: 1.0,
            theta_vq: 1.0,
            dt,
        }
    }

    /// Symplectic Euler: explicit forces, positions advanced by the new
    /// velocity.
    pub fn symplectic_euler(dt: f64) -> Self {
        SchemeParams {
            theta: 0.0,
            theta_vq: 1.0,
            dt,
        }
    }
}

/// Scalar driving force on a prismatic DoF, evaluated at the scheme's
/// force evaluation time `t0 + theta dt`.
#[derive(Debug, Clone, Copy)]
pub enum ForceProfile {
    Constant { force: f64 },
    /// Linear between the endpoints, clamped outside `[t_start, t_end]`.
    Ramp {
        from: f64,
        to: f64,
        t_start: f64,
        t_end: f64,
    },
}

impl ForceProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ForceProfile::Constant { force } => *force,
            ForceProfile::Ramp {
                from,
                to,
                t_start,
                t_end,
            } => {
                if t <= *t_start {
                    *from
                } else if t >= *t_end {
                    *to
                } else {
                    from + (to - from) * (t - t_start) / (t_end - t_start)
                }
            }
        }
    }
}

/// A tetrahedral FEM body.
#[derive(Debug, Clone)]
pub struct DeformableBody {
    pub mesh: TetMesh,
    pub geom: ElementGeometry,
    pub boundary: BoundaryInfo,
    pub lame: LameParams,
    pub rayleigh: RayleighParams,
    pub friction: f64,
    pub q: DVector<f64>,
    pub v: DVector<f64>,
    pub state: MaterialState,
    pub mass: BlockSparseSym,
}

impl DeformableBody {
    pub fn new(
        mesh: TetMesh,
        lame: LameParams,
        rayleigh: RayleighParams,
        friction: f64,
    ) -> Result<Self> {
        let geom = build_element_geometry(&mesh)?;
        let boundary = extract_boundary(&mesh)?;
        let mass = assemble_mass_matrix(&mesh, &geom);
        let q = mesh.rest_configuration();
        let v = DVector::zeros(mesh.n_dofs());
        let state = MaterialState::rest(mesh.n_elements());
        Ok(DeformableBody {
            mesh,
            geom,
            boundary,
            lame,
            rayleigh,
            friction,
            q,
            v,
            state,
            mass,
        })
    }

    pub fn n_dofs(&self) -> usize {
        self.mesh.n_dofs()
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.mass.quadratic_form(&self.v)
    }

    /// Step artifacts at the current configuration under the given lagged
    /// rotations: the elastic force and stiffness frozen at `q`, plus the
    /// gravity load through the consistent mass.
    pub fn artifacts(&self, state: &MaterialState, gravity: &Vector3<f64>) -> BodyArtifacts {
        let (f_e0, stiffness) =
            elastic_force_and_stiffness(&self.mesh, &self.geom, &self.q, state, &self.lame);
        let mut g_stack = DVector::zeros(self.n_dofs());
        for i in 0..self.mesh.n_vertices() {
            g_stack.fixed_rows_mut::<3>(3 * i).copy_from(gravity);
        }
        let f_ext = self.mass.matvec(&g_stack);
        BodyArtifacts {
            mass: self.mass.clone(),
            stiffness,
            q0: self.q.clone(),
            v0: self.v.clone(),
            f_e0,
            f_ext,
            rayleigh: self.rayleigh,
        }
    }
}

/// A rigid body restricted to translation along one axis: a single scalar
/// DoF measuring travel from the shape's reference placement.
#[derive(Debug, Clone)]
pub struct RigidPrismatic {
    /// Collider geometry at `s = 0`.
    pub shape: Shape,
    /// Unit travel direction.
    pub axis: Vector3<f64>,
    pub mass: f64,
    /// Generalized driving force along the axis.
    pub force: ForceProfile,
    pub friction: f64,
    pub s: f64,
    pub v: f64,
}

impl RigidPrismatic {
    fn artifacts(&self, t_eval: f64) -> BodyArtifacts {
        let mut mass = BlockSparseSym::zeros(vec![1]);
        mass.add_block(0, 0, &DMatrix::from_element(1, 1, self.mass));
        BodyArtifacts {
            mass,
            stiffness: BlockSparseSym::zeros(vec![1]),
            q0: DVector::from_element(1, self.s),
            v0: DVector::from_element(1, self.v),
            f_e0: DVector::zeros(1),
            f_ext: DVector::from_element(1, self.force.eval(t_eval)),
            rayleigh: RayleighParams::none(),
        }
    }
}

/// An immovable collider.
#[derive(Debug, Clone)]
pub struct StaticCollider {
    pub shape: Shape,
    pub friction: f64,
}

/// Anything the world can hold.
#[derive(Debug, Clone)]
pub enum Body {
    Deformable(DeformableBody),
    Prismatic(RigidPrismatic),
    Static(StaticCollider),
}

impl Body {
    pub fn n_dofs(&self) -> usize {
        match self {
            Body::Deformable(d) => d.n_dofs(),
            Body::Prismatic(_) => 1,
            Body::Static(_) => 0,
        }
    }
}

/// Everything a body contributes to one step, frozen at the step's start.
/// The discrete momentum residual
///
/// ```text
/// m(v) = M (v - v0) - dt [ f_e(q_theta(v)) + f_d(v_theta(v)) + f_ext ]
/// ```
///
/// is affine in `v` because the elastic force is affine while rotations
/// are lagged; its constant Jacobian is [`BodyArtifacts::tangent_matrix`].
#[derive(Debug, Clone)]
pub struct BodyArtifacts {
    pub mass: BlockSparseSym,
    pub stiffness: BlockSparseSym,
    pub q0: DVector<f64>,
    pub v0: DVector<f64>,
    /// Elastic force at `q0`.
    pub f_e0: DVector<f64>,
    /// Constant external force over the step.
    pub f_ext: DVector<f64>,
    pub rayleigh: RayleighParams,
}

impl BodyArtifacts {
    /// The residual whose root is the unconstrained next velocity.
    pub fn momentum_residual(&self, scheme: &SchemeParams, v: &DVector<f64>) -> DVector<f64> {
        let dt = scheme.dt;
        let v_tvq = &self.v0 * (1.0 - scheme.theta_vq) + v * scheme.theta_vq;
        let v_t = &self.v0 * (1.0 - scheme.theta) + v * scheme.theta;
        // q_theta - q0 = theta dt v_tvq, so f_e(q_theta) = f_e0 - K theta dt v_tvq
        let f_e = &self.f_e0 - self.stiffness.matvec(&(v_tvq * (scheme.theta * dt)));
        let f_d = damping_force(&self.mass, &self.stiffness, &v_t, &self.rayleigh);
        self.mass.matvec(&(v - &self.v0)) - (f_e + f_d + &self.f_ext) * dt
    }

    /// Combined magnitude of the residual's constituent terms. The residual
    /// itself vanishes at the solution, so relative error measures need the
    /// size of what was subtracted to produce it.
    pub fn momentum_scale(&self, scheme: &SchemeParams, v: &DVector<f64>) -> f64 {
        let dt = scheme.dt;
        let v_tvq = &self.v0 * (1.0 - scheme.theta_vq) + v * scheme.theta_vq;
        let v_t = &self.v0 * (1.0 - scheme.theta) + v * scheme.theta;
        let f_e = &self.f_e0 - self.stiffness.matvec(&(v_tvq * (scheme.theta * dt)));
        let f_d = damping_force(&self.mass, &self.stiffness, &v_t, &self.rayleigh);
        self.mass.matvec(&(v - &self.v0)).norm()
            + dt * (f_e.norm() + f_d.norm() + self.f_ext.norm())
    }

    /// Constant Jacobian of the residual:
    /// `(1 + alpha theta dt) M + theta dt (theta_vq dt + beta) K`.
    pub fn tangent_matrix(&self, scheme: &SchemeParams) -> BlockSparseSym {
        let dt = scheme.dt;
        let cm = 1.0 + self.rayleigh.alpha * scheme.theta * dt;
        let ck = scheme.theta * dt * (scheme.theta_vq * dt + self.rayleigh.beta);
        BlockSparseSym::linear_combination(&[(cm, &self.mass), (ck, &self.stiffness)])
    }

    /// Advance positions with the scheme's velocity blend.
    pub fn position_update(&self, scheme: &SchemeParams, v: &DVector<f64>) -> DVector<f64> {
        let v_tvq = &self.v0 * (1.0 - scheme.theta_vq) + v * scheme.theta_vq;
        &self.q0 + v_tvq * scheme.dt
    }
}

/// Factorize the tangent (participating blocks trailing) and solve the
/// free motion with a single factorization: because the residual is affine
/// with Jacobian equal to the tangent, no iteration on the physics is
/// needed. One pass of iterative refinement against the same factor
/// removes the roundoff the first substitution leaves behind (of order
/// machine epsilon times the tangent's condition number, noticeable for
/// very stiff materials), putting the root at machine precision.
pub fn free_motion(
    artifacts: &BodyArtifacts,
    scheme: &SchemeParams,
    participating: &[bool],
) -> Result<(DVector<f64>, CholeskyWithSchur, bool)> {
    let a = artifacts.tangent_matrix(scheme);
    let perm = order_within_partitions(&a.block_adjacency(), participating, a.sizes());
    let (factor, boosted) = factorize_with_schur_jitter(&a, &perm)?;
    let m0 = artifacts.momentum_residual(scheme, &artifacts.v0);
    let mut v_star = &artifacts.v0 - factor.solve_full(&m0);
    let m1 = artifacts.momentum_residual(scheme, &v_star);
    v_star -= factor.solve_full(&m1);
    Ok((v_star, factor, boosted))
}

/// Per-step record of what happened, for diagnostics output.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub step: u64,
    /// Simulation time at the end of the step.
    pub time: f64,
    pub kinetic_energy: f64,
    pub elastic_energy: f64,
    /// Cumulative energy removed by damping since the start.
    pub dissipated_energy: f64,
    pub n_constraints: usize,
    pub constraint_rows: usize,
    pub reduced_dofs: usize,
    pub solver_iterations: usize,
    pub grad_norm: f64,
    pub wall_ms: f64,
    /// `|| m(v) - J^T gamma ||` over all bodies, relative to its scale.
    pub momentum_residual_rel: f64,
    /// Worst per-body `|| m(v*) ||` relative to `|| m(v0) ||`.
    pub free_motion_residual_rel: f64,
    pub inverted_elements: usize,
    pub factor_fill_blocks: usize,
    pub factor_boosted: bool,
    pub line_search_steps: usize,
    pub solver_grad_norms: Vec<f64>,
    pub solver_costs: Vec<f64>,
    pub optimality: Option<OptimalityReport>,
}

/// The scene: bodies, welds, gravity, and the step configuration.
pub struct World {
    pub bodies: Vec<Body>,
    pub welds: Vec<WeldSpec>,
    pub gravity: Vector3<f64>,
    pub scheme: SchemeParams,
    pub solver: SolverParams,
    pub contact: ContactParams,
    time: f64,
    step_index: u64,
    dissipated: f64,
    warm: HashMap<ConstraintId, Vector3<f64>>,
}

impl World {
    pub fn new(scheme: SchemeParams) -> Self {
        World {
            bodies: Vec::new(),
            welds: Vec::new(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            scheme,
            solver: SolverParams::default(),
            contact: ContactParams::default(),
            time: 0.0,
            step_index: 0,
            dissipated: 0.0,
            warm: HashMap::new(),
        }
    }

    pub fn add_body(&mut self, body: Body) -> usize {
        self.bodies.push(body);
        self.bodies.len() - 1
    }

    pub fn add_deformable(&mut self, body: DeformableBody) -> usize {
        self.add_body(Body::Deformable(body))
    }

    pub fn add_static(&mut self, shape: Shape, friction: f64) -> usize {
        self.add_body(Body::Static(StaticCollider { shape, friction }))
    }

    pub fn add_prismatic(&mut self, body: RigidPrismatic) -> usize {
        self.add_body(Body::Prismatic(body))
    }

    pub fn add_weld(&mut self, spec: WeldSpec) {
        self.welds.push(spec);
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn dissipated_energy(&self) -> f64 {
        self.dissipated
    }

    pub fn warm_start_impulses(&self) -> &HashMap<ConstraintId, Vector3<f64>> {
        &self.warm
    }

    pub fn deformable(&self, i: usize) -> &DeformableBody {
        match &self.bodies[i] {
            Body::Deformable(d) => d,
            _ => panic!("body {i} is not deformable"),
        }
    }

    pub fn deformable_mut(&mut self, i: usize) -> &mut DeformableBody {
        match &mut self.bodies[i] {
            Body::Deformable(d) => d,
            _ => panic!("body {i} is not deformable"),
        }
    }

    pub fn prismatic(&self, i: usize) -> &RigidPrismatic {
        match &self.bodies[i] {
            Body::Prismatic(p) => p,
            _ => panic!("body {i} is not prismatic"),
        }
    }

    pub fn prismatic_mut(&mut self, i: usize) -> &mut RigidPrismatic {
        match &mut self.bodies[i] {
            Body::Prismatic(p) => p,
            _ => panic!("body {i} is not prismatic"),
        }
    }

    /// Total linear momentum of the moving bodies.
    pub fn linear_momentum(&self) -> Vector3<f64> {
        let mut p = Vector3::zeros();
        for body in &self.bodies {
            match body {
                Body::Deformable(d) => {
                    let mv = d.mass.matvec(&d.v);
                    for i in 0..d.mesh.n_vertices() {
                        p += Vector3::new(mv[3 * i], mv[3 * i + 1], mv[3 * i + 2]);
                    }
                }
                Body::Prismatic(r) => p += r.axis * (r.mass * r.v),
                Body::Static(_) => {}
            }
        }
        p
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.bodies
            .iter()
            .map(|b| match b {
                Body::Deformable(d) => d.kinetic_energy(),
                Body::Prismatic(r) => 0.5 * r.mass * r.v * r.v,
                Body::Static(_) => 0.0,
            })
            .sum()
    }

    /// Elastic energy under the current lagged rotations.
    pub fn elastic_energy(&self) -> f64 {
        self.bodies
            .iter()
            .map(|b| match b {
                Body::Deformable(d) => {
                    elastic_energy(&d.mesh, &d.geom, &d.q, &d.state, &d.lame)
                }
                _ => 0.0,
            })
            .sum()
    }

    /// Gather all constraints active at the current configuration.
    fn gather_constraints(&self) -> crate::constraints::ConstraintSet {
        let mut deformables = Vec::new();
        let mut statics = Vec::new();
        let mut prismatics = Vec::new();
        for (i, body) in self.bodies.iter().enumerate() {
            match body {
                Body::Deformable(d) => deformables.push(DeformableView {
                    body: i,
                    mesh: &d.mesh,
                    boundary: &d.boundary,
                    q: &d.q,
                    mu: d.friction,
                }),
                Body::Static(s) => statics.push(StaticView {
                    collider: i,
                    shape: &s.shape,
                    mu: s.friction,
                }),
                Body::Prismatic(p) => prismatics.push(PrismaticView {
                    body: i,
                    shape: &p.shape,
                    axis: p.axis,
                    s: p.s,
                    mu: p.friction,
                }),
            }
        }
        let pairs = detect_contacts(&deformables, &statics, &prismatics, &self.contact);
        let mut constraints: Vec<ConstraintBlock> = pairs
            .iter()
            .map(|p| contact_constraint(p, &self.contact, self.scheme.dt))
            .collect();
        for (index, spec) in self.welds.iter().enumerate() {
            let x_a = vertex_position(&self.deformable(spec.body).q, spec.vertex);
            let target = match spec.target {
                WeldTarget::World(p) => p,
                WeldTarget::BodyVertex { body, vertex } => {
                    vertex_position(&self.deformable(body).q, vertex)
                }
            };
            constraints.push(weld_constraint(index, spec, &x_a, &target, self.scheme.dt));
        }
        stack_constraints(constraints, self.bodies.len())
    }

    /// Write each moving body's step tangent — and, where constraints make
    /// blocks participate, the condensed matrix its factorization exposes —
    /// as matrix-market files in `dir`. Mirrors the step pipeline
    /// read-only at the current configuration.
    pub fn dump_matrices(&self, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
        use crate::sparse::{write_dense_sym_market, write_factor_market, write_sym_market};
        use std::io::BufWriter;
        let set = self.gather_constraints();
        let t_eval = self.time + self.scheme.theta * self.scheme.dt;
        let mut written = Vec::new();
        for (i, body) in self.bodies.iter().enumerate() {
            let arts = match body {
                Body::Deformable(d) => d.artifacts(&d.state, &self.gravity),
                Body::Prismatic(p) => p.artifacts(t_eval),
                Body::Static(_) => continue,
            };
            let a = arts.tangent_matrix(&self.scheme);
            let path = dir.join(format!("body{i:02}_tangent.mtx"));
            let mut w = BufWriter::new(std::fs::File::create(&path)?);
            write_sym_market(&mut w, &a, &format!("step tangent of body {i}"))?;
            written.push(path);
            let mut participating = vec![false; a.n_blocks()];
            for &b in &set.participating[i] {
                participating[b] = true;
            }
            if participating.iter().any(|&p| p) {
                let perm =
                    order_within_partitions(&a.block_adjacency(), &participating, a.sizes());
                let (factor, _) = factorize_with_schur_jitter(&a, &perm)?;
                let path = dir.join(format!("body{i:02}_factor.mtx"));
                let mut w = BufWriter::new(std::fs::File::create(&path)?);
                write_factor_market(
                    &mut w,
                    factor.factor(),
                    &format!("cholesky factor of body {i}, participating blocks last"),
                )?;
                written.push(path);
                let path = dir.join(format!("body{i:02}_condensed.mtx"));
                let mut w = BufWriter::new(std::fs::File::create(&path)?);
                write_dense_sym_market(
                    &mut w,
                    factor.schur(),
                    &format!("condensed tangent on participating DoFs of body {i}"),
                )?;
                written.push(path);
            }
        }
        Ok(written)
    }

    /// Advance one step. On error the world is left untouched.
    pub fn step(&mut self) -> Result<StepDiagnostics> {
        let wall_start = Instant::now();
        let scheme = self.scheme;
        let dt = scheme.dt;
        let t_eval = self.time + scheme.theta * dt;

        // stage 1: lagged rotations from the current configuration
        let mut staged_states: Vec<Option<MaterialState>> = Vec::with_capacity(self.bodies.len());
        let mut inverted_elements = 0;
        for body in &self.bodies {
            match body {
                Body::Deformable(d) => {
                    let (state, kept) = update_lagged_rotation(&d.mesh, &d.geom, &d.q, &d.state);
                    inverted_elements += kept;
                    staged_states.push(Some(state));
                }
                _ => staged_states.push(None),
            }
        }

        // stage 2: constraints at the start-of-step configuration
        let set = self.gather_constraints();

        // stage 3: per-body artifacts, factorization, free motion
        let mut artifacts: Vec<Option<BodyArtifacts>> = Vec::with_capacity(self.bodies.len());
        let mut factors: Vec<Option<CholeskyWithSchur>> = Vec::with_capacity(self.bodies.len());
        let mut v_stars: Vec<Option<DVector<f64>>> = Vec::with_capacity(self.bodies.len());
        let mut free_residual_rel: f64 = 0.0;
        let mut fill_blocks = 0;
        let mut any_boosted = false;
        for (i, body) in self.bodies.iter().enumerate() {
            let arts = match body {
                Body::Deformable(d) => {
                    Some(d.artifacts(staged_states[i].as_ref().unwrap(), &self.gravity))
                }
                Body::Prismatic(p) => Some(p.artifacts(t_eval)),
                Body::Static(_) => None,
            };
            match &arts {
                Some(a) => {
                    let n_blocks = a.mass.n_blocks();
                    let mut participating = vec![false; n_blocks];
                    for &b in &set.participating[i] {
                        participating[b] = true;
                    }
                    let (v_star, factor, boosted) = free_motion(a, &scheme, &participating)?;
                    let m_star = a.momentum_residual(&scheme, &v_star).norm();
                    let m0 = a.momentum_residual(&scheme, &a.v0).norm();
                    if m0 > 0.0 {
                        free_residual_rel = free_residual_rel.max(m_star / m0);
                    }
                    fill_blocks += factor.fill_blocks();
                    any_boosted |= boosted;
                    factors.push(Some(factor));
                    v_stars.push(Some(v_star));
                }
                None => {
                    factors.push(None);
                    v_stars.push(None);
                }
            }
            artifacts.push(arts);
        }

        // stage 4: assemble and solve the condensed problem
        let mut reduced_offset = vec![usize::MAX; self.bodies.len()];
        let mut n_p = 0;
        for i in 0..self.bodies.len() {
            if let Some(f) = &factors[i] {
                let m_p = f.perm().m_p();
                if m_p > 0 {
                    reduced_offset[i] = n_p;
                    n_p += m_p;
                }
            }
        }

        let mut v_next: Vec<Option<DVector<f64>>> = v_stars.clone();
        let mut solve_result = None;
        let mut problem = None;
        if !set.constraints.is_empty() {
            debug_assert!(n_p > 0, "constraints must touch at least one DoF");
            let mut a_hat = DMatrix::zeros(n_p, n_p);
            let mut v_star_p = DVector::zeros(n_p);
            for i in 0..self.bodies.len() {
                let off = reduced_offset[i];
                if off == usize::MAX {
                    continue;
                }
                let factor = factors[i].as_ref().unwrap();
                let schur = factor.schur();
                let m_p = schur.nrows();
                a_hat.view_mut((off, off), (m_p, m_p)).copy_from(schur);
                let permuted = factor.perm().permute_vec(v_stars[i].as_ref().unwrap());
                v_star_p
                    .rows_mut(off, m_p)
                    .copy_from(&permuted.rows(factor.perm().m_n(), m_p));
            }
            let mut raw = Vec::with_capacity(set.constraints.len());
            for c in &set.constraints {
                let mut j = DMatrix::zeros(3, n_p);
                for block in &c.blocks {
                    let off = reduced_offset[block.body];
                    let factor = factors[block.body].as_ref().unwrap();
                    let sizes = artifacts[block.body].as_ref().unwrap().mass.clone();
                    for (blk, mat) in &block.entries {
                        let base = sizes.offset(*blk);
                        for col in 0..mat.ncols() {
                            let reduced = factor
                                .perm()
                                .reduced_index_of(base + col)
                                .expect("constraint touches a participating DoF");
                            for row in 0..3 {
                                j[(row, off + reduced)] += mat[(row, col)];
                            }
                        }
                    }
                }
                raw.push((c.cone, j, c.v_hat));
            }
            let p = ReducedProblem::new(a_hat, v_star_p.clone(), raw, &self.contact, dt)?;
            let gamma0: Vec<Vector3<f64>> = set
                .constraints
                .iter()
                .map(|c| self.warm.get(&c.id).copied().unwrap_or_else(Vector3::zeros))
                .collect();
            let warm = gamma0.iter().any(|g| g.norm() > 0.0);
            let result = solve_reduced(&p, &self.solver, warm.then_some(gamma0.as_slice()))?;

            // stage 5: propagate the correction to every DoF
            for i in 0..self.bodies.len() {
                let off = reduced_offset[i];
                if off == usize::MAX {
                    continue;
                }
                let factor = factors[i].as_ref().unwrap();
                let m_p = factor.perm().m_p();
                let dv_p = result.v.rows(off, m_p) - v_star_p.rows(off, m_p);
                let dv_full = factor.expand_delta(&dv_p.into_owned());
                let v = v_stars[i].as_ref().unwrap() + dv_full;
                v_next[i] = Some(v);
            }
            problem = Some(p);
            solve_result = Some(result);
        }

        // stage 6: positions, energies, balance checks
        let mut q_next: Vec<Option<DVector<f64>>> = vec![None; self.bodies.len()];
        let mut kinetic = 0.0;
        let mut elastic = 0.0;
        let mut dissipated_step = 0.0;
        for i in 0..self.bodies.len() {
            if let (Some(a), Some(v)) = (&artifacts[i], &v_next[i]) {
                let q = a.position_update(&scheme, v);
                kinetic += 0.5 * a.mass.quadratic_form(v);
                if let Body::Deformable(d) = &self.bodies[i] {
                    elastic +=
                        elastic_energy(&d.mesh, &d.geom, &q, staged_states[i].as_ref().unwrap(), &d.lame);
                }
                let v_t = &a.v0 * (1.0 - scheme.theta) + v * scheme.theta;
                let f_d = damping_force(&a.mass, &a.stiffness, &v_t, &a.rayleigh);
                dissipated_step -= dt * f_d.dot(&v_t);
                q_next[i] = Some(q);
            }
        }

        // momentum balance: m(v) must equal the constraint impulses J^T gamma
        let mut jt_gamma: Vec<DVector<f64>> = self
            .bodies
            .iter()
            .map(|b| DVector::zeros(b.n_dofs()))
            .collect();
        if let Some(result) = &solve_result {
            for (c, gamma) in set.constraints.iter().zip(&result.impulses) {
                for block in &c.blocks {
                    let base_sizes = artifacts[block.body].as_ref().unwrap();
                    for (blk, mat) in &block.entries {
                        let base = base_sizes.mass.offset(*blk);
                        let contribution = mat.transpose() * gamma;
                        for r in 0..contribution.nrows() {
                            jt_gamma[block.body][base + r] += contribution[r];
                        }
                    }
                }
            }
        }
        let mut res_sq = 0.0;
        let mut term_scale = 0.0f64;
        let mut j_sq = 0.0;
        for i in 0..self.bodies.len() {
            if let (Some(a), Some(v)) = (&artifacts[i], &v_next[i]) {
                let m = a.momentum_residual(&scheme, v);
                res_sq += (&m - &jt_gamma[i]).norm_squared();
                term_scale = term_scale.max(a.momentum_scale(&scheme, v));
                j_sq += jt_gamma[i].norm_squared();
            }
        }
        let total_dofs: usize = self.bodies.iter().map(|b| b.n_dofs()).sum();
        let scale = term_scale
            .max(j_sq.sqrt())
            .max(1e-14 * (total_dofs.max(1) as f64).sqrt());
        let momentum_residual_rel = res_sq.sqrt() / scale;

        let optimality = match (&problem, &solve_result) {
            (Some(p), Some(r)) => Some(check_optimality(p, r)),
            _ => None,
        };

        // stage 7: commit
        for (i, body) in self.bodies.iter_mut().enumerate() {
            match body {
                Body::Deformable(d) => {
                    d.q = q_next[i].take().unwrap();
                    d.v = v_next[i].take().unwrap();
                    d.state = staged_states[i].take().unwrap();
                }
                Body::Prismatic(p) => {
                    p.s = q_next[i].as_ref().unwrap()[0];
                    p.v = v_next[i].as_ref().unwrap()[0];
                }
                Body::Static(_) => {}
            }
        }
        self.warm.clear();
        if let Some(result) = &solve_result {
            for (c, gamma) in set.constraints.iter().zip(&result.impulses) {
                self.warm.insert(c.id, *gamma);
            }
        }
        self.time += dt;
        self.step_index += 1;
        self.dissipated += dissipated_step;

        let (solver_iterations, grad_norm, line_search_steps, solver_grad_norms, solver_costs) =
            match &solve_result {
                Some(r) => (
                    r.iterations,
                    r.grad_norm,
                    r.ls_steps_total,
                    r.grad_norms.clone(),
                    r.costs.clone(),
                ),
                None => (0, 0.0, 0, Vec::new(), Vec::new()),
            };

        Ok(StepDiagnostics {
            step: self.step_index,
            time: self.time,
            kinetic_energy: kinetic,
            elastic_energy: elastic,
            dissipated_energy: self.dissipated,
            n_constraints: set.constraints.len(),
            constraint_rows: set.total_rows(),
            reduced_dofs: n_p,
            solver_iterations,
            grad_norm,
            wall_ms: wall_start.elapsed().as_secs_f64() * 1e3,
            momentum_residual_rel,
            free_motion_residual_rel: free_residual_rel,
            inverted_elements,
            factor_fill_blocks: fill_blocks,
            factor_boosted: any_boosted,
            line_search_steps,
            solver_grad_norms,
            solver_costs,
            optimality,
        })
    }
}
