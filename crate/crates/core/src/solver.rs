//! Convex solve of the coupled constraint problem on the participating
//! velocities.
//!
//! The step minimizes
//!
//! ```text
//! l(v) = 1/2 ||v - v*||^2_A + sum_i 1/2 gamma_i^T R_i gamma_i
//! gamma_i = P_i( R_i^-1 (v_hat_i - J_i v) )
//! ```
//!
//! where `A` is the (dense, condensed) free-motion tangent on participating
//! DoFs, `R_i` a diagonal regularization, and `P_i` the projection onto the
//! constraint's cone in the `R_i` metric. With that particular projection
//! the gradient collapses to `A (v - v*) - J^T gamma`, so a converged
//! velocity satisfies the regularized momentum balance with impulses that
//! are exactly cone-feasible by construction. The Hessian
//! `A + sum J^T G J` is positive semidefinite, and Newton with Armijo
//! backtracking converges globally.

use nalgebra::{DMatrix, DVector, Dyn, Matrix3, Vector3};

use crate::constraints::{Cone, ContactParams};
use crate::error::{Error, Result};

type DenseChol = nalgebra::linalg::Cholesky<f64, Dyn>;

/// Newton loop tunables.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams {
    /// Relative gradient tolerance.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Backtracking shrink factor.
    pub ls_rho: f64,
    /// Armijo sufficient-decrease constant.
    pub ls_c: f64,
    /// Maximum backtracking steps per iteration.
    pub ls_max: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tolerance: 1e-6,
            max_iterations: 100,
            ls_rho: 0.8,
            ls_c: 1e-4,
            ls_max: 40,
        }
    }
}

/// Project `y = (y_t1, y_t2, y_n)` onto the friction cone
/// `||gamma_t|| <= mu gamma_n` in the metric `diag(R_t, R_t, R_n)`, where
/// `mu_hat = mu R_t / R_n`. With `mu_hat = mu` this is the Euclidean
/// projection.
pub fn project_cone_weighted(y: &Vector3<f64>, mu: f64, mu_hat: f64) -> Vector3<f64> {
    let yt_norm = y.xy().norm();
    if yt_norm <= mu * y.z {
        // already feasible
        *y
    } else if y.z <= -mu_hat * yt_norm {
        // in the polar cone: nearest feasible point is the tip
        Vector3::zeros()
    } else {
        let gn = (y.z + mu_hat * yt_norm) / (1.0 + mu * mu_hat);
        let scale = mu * gn / yt_norm;
        Vector3::new(scale * y.x, scale * y.y, gn)
    }
}

/// Euclidean friction-cone projection.
pub fn project_friction_cone(y: &Vector3<f64>, mu: f64) -> Vector3<f64> {
    project_cone_weighted(y, mu, mu)
}

/// Jacobian `dP/dy` of [`project_cone_weighted`]. Piecewise constant rank
/// on each region; the sliding branch follows from differentiating the
/// closed form.
pub fn project_cone_gradient(y: &Vector3<f64>, mu: f64, mu_hat: f64) -> Matrix3<f64> {
    let yt_norm = y.xy().norm();
    if yt_norm <= mu * y.z {
        Matrix3::identity()
    } else if y.z <= -mu_hat * yt_norm {
        Matrix3::zeros()
    } else {
        let denom = 1.0 + mu * mu_hat;
        let that = Vector3::new(y.x / yt_norm, y.y / yt_norm, 0.0);
        let gn = (y.z + mu_hat * yt_norm) / denom;
        let mut p = Matrix3::zeros();
        p[(2, 2)] = 1.0 / denom;
        for j in 0..2 {
            p[(2, j)] = mu_hat * that[j] / denom;
            p[(j, 2)] = mu * that[j] / denom;
        }
        for i in 0..2 {
            for j in 0..2 {
                let delta = if i == j { 1.0 } else { 0.0 };
                p[(i, j)] = mu
                    * (mu_hat / denom * that[i] * that[j]
                        + gn / yt_norm * (delta - that[i] * that[j]));
            }
        }
        p
    }
}

/// How far an impulse sits outside its cone (0 when feasible).
pub fn cone_violation(cone: &Cone, gamma: &Vector3<f64>) -> f64 {
    match cone {
        Cone::Friction { mu } => {
            let slack = gamma.xy().norm() - mu * gamma.z;
            slack.max(-gamma.z).max(0.0)
        }
        Cone::Bilateral => 0.0,
    }
}

/// A 3-row Jacobian stored as its nonzero column runs. A constraint
/// touches a handful of vertex blocks (contiguous after permutation) plus
/// possibly one prismatic scalar, so the dense 3 x n row would be almost
/// entirely zeros; storing segments makes `J v`, `J^T g`, and the
/// `J^T G J` Hessian contribution proportional to the touched DoFs.
#[derive(Debug, Clone)]
pub struct RowBlocks {
    ncols: usize,
    /// (start column, 3 x k dense block) for each maximal nonzero run.
    segments: Vec<(usize, DMatrix<f64>)>,
}

impl RowBlocks {
    pub fn from_dense(j: &DMatrix<f64>) -> RowBlocks {
        assert_eq!(j.nrows(), 3);
        let n = j.ncols();
        let nonzero = |c: usize| (0..3).any(|r| j[(r, c)] != 0.0);
        let mut segments = Vec::new();
        let mut c = 0;
        while c < n {
            if nonzero(c) {
                let start = c;
                while c < n && nonzero(c) {
                    c += 1;
                }
                segments.push((start, j.columns(start, c - start).into_owned()));
            } else {
                c += 1;
            }
        }
        RowBlocks { ncols: n, segments }
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, self.ncols);
        for (start, block) in &self.segments {
            j.view_mut((0, *start), (3, block.ncols())).copy_from(block);
        }
        j
    }

    /// `J v` as a contact-frame vector.
    pub fn mul_vec(&self, v: &DVector<f64>) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for (start, block) in &self.segments {
            for c in 0..block.ncols() {
                let vc = v[start + c];
                out.x += block[(0, c)] * vc;
                out.y += block[(1, c)] * vc;
                out.z += block[(2, c)] * vc;
            }
        }
        out
    }

    /// `out += J^T g`.
    pub fn tr_mul_acc(&self, g: &Vector3<f64>, out: &mut DVector<f64>) {
        for (start, block) in &self.segments {
            for c in 0..block.ncols() {
                out[start + c] +=
                    block[(0, c)] * g.x + block[(1, c)] * g.y + block[(2, c)] * g.z;
            }
        }
    }

    /// `h += J^T G J` for a 3x3 `G`, touching only the segment blocks.
    pub fn add_quadratic(&self, g: &Matrix3<f64>, h: &mut DMatrix<f64>) {
        for (s1, b1) in &self.segments {
            // (G B1): 3 x k1, reused across the inner loop
            let gb1 = g * b1;
            for (s2, b2) in &self.segments {
                for c2 in 0..b2.ncols() {
                    for c1 in 0..b1.ncols() {
                        let mut acc = 0.0;
                        for r in 0..3 {
                            acc += b2[(r, c2)] * gb1[(r, c1)];
                        }
                        h[(s2 + c2, s1 + c1)] += acc;
                    }
                }
            }
        }
    }

    /// Mean diagonal of `J D^-1 J^T` for a diagonal matrix `D`.
    pub fn delassus(&self, d: &DVector<f64>) -> f64 {
        let mut trace = 0.0;
        for (start, block) in &self.segments {
            for c in 0..block.ncols() {
                let inv = 1.0 / d[start + c];
                for r in 0..3 {
                    trace += block[(r, c)] * block[(r, c)] * inv;
                }
            }
        }
        trace / 3.0
    }
}

/// One constraint restricted to the participating DoFs.
#[derive(Debug, Clone)]
pub struct ReducedConstraint {
    pub cone: Cone,
    /// 3 x n_p Jacobian, stored by nonzero column runs.
    pub j: RowBlocks,
    pub v_hat: Vector3<f64>,
    /// Diagonal regularization `(R_t, R_t, R_n)`.
    pub r: Vector3<f64>,
}

impl ReducedConstraint {
    fn mu_hat(&self) -> f64 {
        match self.cone {
            Cone::Friction { mu } => mu * self.r.x / self.r.z,
            Cone::Bilateral => 0.0,
        }
    }

    /// `gamma = P(R^-1 (v_hat - J v))` and `G = dP/dy R^-1`.
    fn impulse_and_hessian(&self, v: &DVector<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let vc = self.j.mul_vec(v);
        let y = Vector3::new(
            (self.v_hat.x - vc[0]) / self.r.x,
            (self.v_hat.y - vc[1]) / self.r.y,
            (self.v_hat.z - vc[2]) / self.r.z,
        );
        match self.cone {
            Cone::Bilateral => {
                let mut g = Matrix3::zeros();
                g[(0, 0)] = 1.0 / self.r.x;
                g[(1, 1)] = 1.0 / self.r.y;
                g[(2, 2)] = 1.0 / self.r.z;
                (y, g)
            }
            Cone::Friction { mu } => {
                let mu_hat = self.mu_hat();
                let gamma = project_cone_weighted(&y, mu, mu_hat);
                let mut g = project_cone_gradient(&y, mu, mu_hat);
                for i in 0..3 {
                    g[(i, 0)] /= self.r.x;
                    g[(i, 1)] /= self.r.y;
                    g[(i, 2)] /= self.r.z;
                }
                (gamma, g)
            }
        }
    }

    fn impulse(&self, v: &DVector<f64>) -> Vector3<f64> {
        self.impulse_and_hessian(v).0
    }
}

/// Per-constraint Delassus scale: the mean diagonal of `J D^-1 J^T` with
/// `D = diag(A)`, a velocity-per-impulse weight that makes the
/// regularization dimensionless. Using the diagonal rather than the full
/// inverse keeps the estimate local to the DoFs the constraint touches:
/// a contact on a stiff body sees the elastic stiffness in `A`, not the
/// rigid-mode compliance, so near-rigid material gets near-exact stiction.
pub fn delassus_weight(a_diag: &DVector<f64>, j: &RowBlocks) -> f64 {
    j.delassus(a_diag)
}

/// Regularization diagonal for one constraint. Contacts take a physical
/// normal compliance from `stiffness` and `tau_d` plus a small tangential
/// term scaled by the Delassus weight `w`; bilateral rows get a uniformly
/// tiny compliance. The tangential compliance is floored at the normal
/// compliance so the weighted cone aspect ratio `mu·R_t/R_n` never
/// degenerates on very stiff bodies (where the Delassus estimate is tiny);
/// the floor keeps stiction drift at the normal-compliance scale, far
/// below any observable creep.
pub fn regularization_for(cone: &Cone, w: f64, params: &ContactParams, dt: f64) -> Vector3<f64> {
    match cone {
        Cone::Friction { .. } => {
            let tau_d = params.tau_d.unwrap_or(dt);
            let r_n = 1.0 / (dt * (dt + tau_d) * params.stiffness);
            let r_t = (params.sigma * w).max(r_n);
            Vector3::new(r_t, r_t, r_n)
        }
        Cone::Bilateral => {
            let r = 1e-8 * w;
            Vector3::new(r, r, r)
        }
    }
}

/// The condensed convex problem: dense tangent on participating DoFs,
/// free-motion velocity, constraints with regularization attached.
pub struct ReducedProblem {
    pub a_hat: DMatrix<f64>,
    pub v_star: DVector<f64>,
    pub constraints: Vec<ReducedConstraint>,
    chol: DenseChol,
}

impl ReducedProblem {
    /// Assemble from raw constraint rows; fills in each regularization from
    /// the Delassus weight. `a_hat` must be symmetric positive definite.
    pub fn new(
        a_hat: DMatrix<f64>,
        v_star: DVector<f64>,
        raw: Vec<(Cone, DMatrix<f64>, Vector3<f64>)>,
        params: &ContactParams,
        dt: f64,
    ) -> Result<Self> {
        let chol = DenseChol::new(a_hat.clone()).ok_or(Error::NonPositivePivot {
            block: 0,
            dof: 0,
        })?;
        let a_diag = a_hat.diagonal();
        let constraints = raw
            .into_iter()
            .map(|(cone, j, v_hat)| {
                let j = RowBlocks::from_dense(&j);
                let w = delassus_weight(&a_diag, &j);
                let r = regularization_for(&cone, w, params, dt);
                ReducedConstraint { cone, j, v_hat, r }
            })
            .collect();
        Ok(ReducedProblem {
            a_hat,
            v_star,
            constraints,
            chol,
        })
    }

    /// Assemble from fully built constraints, keeping their regularization
    /// as given. Lets a caller pose one convex problem on two different DoF
    /// bases (say, the condensed system and the raw one) and compare the
    /// solutions; `new` would recompute the regularization from each basis's
    /// own diagonal and silently change the problem.
    pub fn with_regularization(
        a_hat: DMatrix<f64>,
        v_star: DVector<f64>,
        constraints: Vec<ReducedConstraint>,
    ) -> Result<Self> {
        let chol = DenseChol::new(a_hat.clone()).ok_or(Error::NonPositivePivot {
            block: 0,
            dof: 0,
        })?;
        Ok(ReducedProblem {
            a_hat,
            v_star,
            constraints,
            chol,
        })
    }

    /// Embed stacked impulses into a velocity: `v* + A^-1 J^T gamma`.
    /// Used to warm start from the previous step's impulses.
    pub fn velocity_from_impulses(&self, gammas: &[Vector3<f64>]) -> DVector<f64> {
        let mut jt_gamma = DVector::zeros(self.v_star.len());
        for (c, g) in self.constraints.iter().zip(gammas) {
            c.j.tr_mul_acc(g, &mut jt_gamma);
        }
        &self.v_star + self.chol.solve(&jt_gamma)
    }

    pub fn n_dofs(&self) -> usize {
        self.v_star.len()
    }

    fn cost(&self, v: &DVector<f64>) -> f64 {
        let dv = v - &self.v_star;
        let mut c = 0.5 * dv.dot(&(&self.a_hat * &dv));
        for con in &self.constraints {
            let g = con.impulse(v);
            c += 0.5 * (con.r.x * g.x * g.x + con.r.y * g.y * g.y + con.r.z * g.z * g.z);
        }
        c
    }
}

/// Solver output: converged velocity, per-constraint impulses, and the
/// per-iteration trace.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub v: DVector<f64>,
    pub impulses: Vec<Vector3<f64>>,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Gradient norm at the start of each iteration (plus the final one).
    pub grad_norms: Vec<f64>,
    /// Cost at the start of each iteration (plus the final one).
    pub costs: Vec<f64>,
    pub ls_steps_total: usize,
}

/// Run Newton with backtracking from `v*` (or a warm start rebuilt from
/// `gamma0`). Stops when the gradient is small against the larger of the
/// momentum and impulse terms; errs after `max_iterations`.
pub fn solve_reduced(
    problem: &ReducedProblem,
    params: &SolverParams,
    gamma0: Option<&[Vector3<f64>]>,
) -> Result<SolveResult> {
    let v = match gamma0 {
        Some(g) if g.len() == problem.constraints.len() => problem.velocity_from_impulses(g),
        _ => problem.v_star.clone(),
    };
    solve_reduced_from(problem, params, v)
}

/// The same Newton solve started from an explicit velocity iterate.
/// Impulses are an `R^-1`-stiff function of velocity, so rebuilding a start
/// from `gamma0` perturbs the constraint velocities by the originating
/// solve's own tolerance amplified by `R^-1`; a caller that already holds a
/// velocity-space iterate should resume from it directly.
pub fn solve_reduced_from(
    problem: &ReducedProblem,
    params: &SolverParams,
    v0: DVector<f64>,
) -> Result<SolveResult> {
    let n = problem.n_dofs();
    if problem.constraints.is_empty() {
        return Ok(SolveResult {
            v: problem.v_star.clone(),
            impulses: Vec::new(),
            iterations: 0,
            grad_norm: 0.0,
            grad_norms: vec![0.0],
            costs: vec![0.0],
            ls_steps_total: 0,
        });
    }
    let mut v = v0;
    let eps_abs = 1e-14 * (n as f64).sqrt();
    let mut grad_norms = Vec::new();
    let mut costs = Vec::new();
    let mut ls_steps_total = 0;
    let mut grad_norm = f64::INFINITY;

    for iter in 0..=params.max_iterations {
        // gradient and impulses at the current iterate
        let mut impulses = Vec::with_capacity(problem.constraints.len());
        let mut hessians = Vec::with_capacity(problem.constraints.len());
        let mut jt_gamma = DVector::zeros(n);
        for c in &problem.constraints {
            let (g, h) = c.impulse_and_hessian(&v);
            c.j.tr_mul_acc(&g, &mut jt_gamma);
            impulses.push(g);
            hessians.push(h);
        }
        let momentum = &problem.a_hat * (&v - &problem.v_star);
        let grad = &momentum - &jt_gamma;
        grad_norm = grad.norm();
        grad_norms.push(grad_norm);
        costs.push(problem.cost(&v));

        // Relative to the larger of the momentum and impulse magnitudes,
        // with an absolute floor so states with essentially no impulse
        // (e.g. everything inside the margin but separating) terminate.
        let scale = momentum.norm().max(jt_gamma.norm());
        if grad_norm <= (params.tolerance * scale).max(eps_abs) {
            return Ok(SolveResult {
                v,
                impulses,
                iterations: iter,
                grad_norm,
                grad_norms,
                costs,
                ls_steps_total,
            });
        }
        if iter == params.max_iterations {
            break;
        }

        // Newton direction on A + sum J^T G J
        let mut h = problem.a_hat.clone();
        for (c, g) in problem.constraints.iter().zip(&hessians) {
            c.j.add_quadratic(g, &mut h);
        }
        let delta = match DenseChol::new(h) {
            Some(ch) => -ch.solve(&grad),
            None => return Err(Error::SolverNonConvergence {
                iterations: iter,
                grad_norm,
            }),
        };

        // Armijo backtracking
        let directional = grad.dot(&delta);
        let cost0 = *costs.last().unwrap();
        let mut alpha = 1.0;
        for _ in 0..params.ls_max {
            let trial = &v + &delta * alpha;
            if problem.cost(&trial) <= cost0 + params.ls_c * alpha * directional {
                break;
            }
            alpha *= params.ls_rho;
            ls_steps_total += 1;
        }
        v += &delta * alpha;
    }
    Err(Error::SolverNonConvergence {
        iterations: params.max_iterations,
        grad_norm,
    })
}

/// Post-solve audit of the optimality conditions.
#[derive(Debug, Clone)]
pub struct OptimalityReport {
    /// `||A(v - v*) - J^T gamma||` relative to the balance scale.
    pub momentum_residual_rel: f64,
    /// Worst cone infeasibility across impulses.
    pub max_cone_violation: f64,
    /// Worst mismatch between stored impulses and the impulse map at `v`.
    pub impulse_consistency: f64,
}

impl OptimalityReport {
    pub fn satisfied(&self, tolerance: f64) -> bool {
        self.momentum_residual_rel <= tolerance
            && self.max_cone_violation <= 1e-12
            && self.impulse_consistency <= 1e-10
    }
}

/// Recompute the optimality conditions from scratch for a solution.
pub fn check_optimality(problem: &ReducedProblem, result: &SolveResult) -> OptimalityReport {
    let n = problem.n_dofs();
    let mut jt_gamma = DVector::zeros(n);
    let mut max_violation: f64 = 0.0;
    let mut consistency: f64 = 0.0;
    for (c, g) in problem.constraints.iter().zip(&result.impulses) {
        c.j.tr_mul_acc(g, &mut jt_gamma);
        max_violation = max_violation.max(cone_violation(&c.cone, g));
        let fresh = c.impulse(&result.v);
        consistency = consistency.max((fresh - g).norm() / g.norm().max(1.0));
    }
    let momentum = &problem.a_hat * (&result.v - &problem.v_star);
    let eps_abs = 1e-14 * (n as f64).sqrt();
    let scale = momentum.norm().max(jt_gamma.norm()).max(eps_abs);
    OptimalityReport {
        momentum_residual_rel: (momentum - jt_gamma).norm() / scale,
        max_cone_violation: max_violation,
        impulse_consistency: consistency,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_known_value() {
        // unit tangential pull at zero normal, mu = 1: lands on the cone
        // surface halfway up
        let got = project_friction_cone(&Vector3::new(1.0, 0.0, 0.0), 1.0);
        assert!((got - Vector3::new(0.5, 0.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn projection_regions() {
        let mu = 0.5;
        // interior: unchanged
        let y = Vector3::new(0.1, 0.0, 1.0);
        assert_eq!(project_friction_cone(&y, mu), y);
        // polar cone: zero
        let y = Vector3::new(0.1, 0.0, -1.0);
        assert_eq!(project_friction_cone(&y, mu), Vector3::zeros());
        // frictionless: tangential part dropped, normal clamped
        let y = Vector3::new(0.3, -0.2, 0.7);
        let g = project_friction_cone(&y, 0.0);
        assert_eq!(g, Vector3::new(0.0, 0.0, 0.7));
        let y = Vector3::new(0.3, -0.2, -0.7);
        assert_eq!(project_friction_cone(&y, 0.0), Vector3::zeros());
    }

    #[test]
    fn projection_is_idempotent_and_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..500 {
            let y = Vector3::new(
                rng.gen_range(-2.0..2.0f64),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let mu = rng.gen_range(0.0..2.0);
            let r_t = rng.gen_range(0.01..1.0);
            let r_n = rng.gen_range(0.01..1.0);
            let mu_hat = mu * r_t / r_n;
            let g = project_cone_weighted(&y, mu, mu_hat);
            // feasibility
            assert!(g.z >= 0.0);
            assert!(g.xy().norm() <= mu * g.z + 1e-12);
            // idempotence
            assert!((project_cone_weighted(&g, mu, mu_hat) - g).norm() < 1e-12);
            // R-weighted orthogonality of the residual: (y - g)^T R g = 0
            let res = y - g;
            let dot = r_t * res.x * g.x + r_t * res.y * g.y + r_n * res.z * g.z;
            assert!(dot.abs() < 1e-12, "projection residual must be R-normal");
        }
    }

    #[test]
    fn projection_minimizes_weighted_distance() {
        // sample feasible points: none may be closer in the R metric
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let y = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mu = rng.gen_range(0.1..1.5);
            let r_t = rng.gen_range(0.1..1.0);
            let r_n = rng.gen_range(0.1..1.0);
            let mu_hat = mu * r_t / r_n;
            let g = project_cone_weighted(&y, mu, mu_hat);
            let dist = |p: &Vector3<f64>| {
                let d = y - p;
                r_t * d.x * d.x + r_t * d.y * d.y + r_n * d.z * d.z
            };
            let d0 = dist(&g);
            for _ in 0..100 {
                let gn = rng.gen_range(0.0..2.0);
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                let gt = rng.gen_range(0.0..1.0) * mu * gn;
                let cand = Vector3::new(gt * ang.cos(), gt * ang.sin(), gn);
                assert!(dist(&cand) >= d0 - 1e-12);
            }
        }
    }

    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let h = 1e-7;
        let mut checked = 0;
        while checked < 200 {
            let y = Vector3::new(
                rng.gen_range(-2.0..2.0f64),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let mu = rng.gen_range(0.05..1.5);
            let r_t = rng.gen_range(0.1..1.0);
            let r_n = rng.gen_range(0.1..1.0);
            let mu_hat = mu * r_t / r_n;
            // skip points near region boundaries where P is not smooth
            let yt = y.xy().norm();
            if (yt - mu * y.z).abs() < 0.05 || (y.z + mu_hat * yt).abs() < 0.05 || yt < 0.05 {
                continue;
            }
            checked += 1;
            let p = project_cone_gradient(&y, mu, mu_hat);
            for j in 0..3 {
                let mut yp = y;
                let mut ym = y;
                yp[j] += h;
                ym[j] -= h;
                let fd = (project_cone_weighted(&yp, mu, mu_hat)
                    - project_cone_weighted(&ym, mu, mu_hat))
                    / (2.0 * h);
                for i in 0..3 {
                    assert!(
                        (p[(i, j)] - fd[i]).abs() < 1e-6,
                        "dP[{i},{j}] analytic {} vs fd {}",
                        p[(i, j)],
                        fd[i]
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_times_inverse_r_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..200 {
            let y = Vector3::new(
                rng.gen_range(-2.0..2.0f64),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let mu = rng.gen_range(0.05..1.5);
            let r_t = rng.gen_range(0.1..1.0);
            let r_n = rng.gen_range(0.1..1.0);
            let mu_hat = mu * r_t / r_n;
            let mut g = project_cone_gradient(&y, mu, mu_hat);
            for i in 0..3 {
                g[(i, 0)] /= r_t;
                g[(i, 1)] /= r_t;
                g[(i, 2)] /= r_n;
            }
            assert!((g - g.transpose()).norm() < 1e-12, "G must be symmetric");
            let eig = nalgebra::DMatrix::from_iterator(3, 3, g.iter().copied()).symmetric_eigen();
            assert!(eig.eigenvalues.min() > -1e-12);
        }
    }

    #[test]
    fn row_blocks_match_dense_operations() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.gen_range(4..20usize);
            let mut j = DMatrix::zeros(3, n);
            // scatter a few nonzero column runs
            for _ in 0..rng.gen_range(1..4usize) {
                let start = rng.gen_range(0..n);
                let len = rng.gen_range(1..4usize).min(n - start);
                for c in start..start + len {
                    for r in 0..3 {
                        j[(r, c)] = rng.gen_range(-1.0..1.0f64);
                    }
                }
            }
            let rb = RowBlocks::from_dense(&j);
            assert_eq!(rb.to_dense(), j);

            let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
            let jv_dense = &j * &v;
            let jv = rb.mul_vec(&v);
            assert!((jv - Vector3::new(jv_dense[0], jv_dense[1], jv_dense[2])).norm() < 1e-14);

            let g = Vector3::new(
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let mut acc = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0f64));
            let expect = &acc + j.transpose() * g;
            rb.tr_mul_acc(&g, &mut acc);
            assert!((acc - expect).norm() < 1e-14);

            let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64));
            let mut h = DMatrix::zeros(n, n);
            rb.add_quadratic(&m, &mut h);
            let expect = j.transpose() * m * &j;
            assert!((h - expect).norm() < 1e-13);

            let d = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0f64));
            let mut trace = 0.0;
            for r in 0..3 {
                for c in 0..n {
                    trace += j[(r, c)] * j[(r, c)] / d[c];
                }
            }
            assert!((rb.delassus(&d) - trace / 3.0).abs() < 1e-13);
        }
    }

    #[test]
    fn regularization_values() {
        let params = ContactParams::default();
        let dt = 0.01;
        // tau_d defaults to dt: R_n = 1 / (dt * 2 dt * k)
        let r = regularization_for(&Cone::Friction { mu: 1.0 }, 2.0, &params, dt);
        assert!((r.z - 1.0 / (0.01 * 0.02 * 1e8)).abs() < 1e-18);
        assert!((r.x - 1e-3 * 2.0).abs() < 1e-15);
        assert_eq!(r.x, r.y);
        let r = regularization_for(&Cone::Bilateral, 2.0, &params, dt);
        assert!((r.x - 2e-8).abs() < 1e-20);
    }

    fn single_contact_problem(
        mass: f64,
        v_star: Vector3<f64>,
        mu: f64,
        v_hat: Vector3<f64>,
    ) -> ReducedProblem {
        let a = DMatrix::identity(3, 3) * mass;
        ReducedProblem::new(
            a,
            DVector::from_column_slice(v_star.as_slice()),
            vec![(Cone::Friction { mu }, DMatrix::identity(3, 3), v_hat)],
            &ContactParams::default(),
            0.01,
        )
        .unwrap()
    }

    #[test]
    fn no_constraints_returns_free_motion_unchanged() {
        let a = DMatrix::identity(2, 2);
        let v_star = DVector::from_column_slice(&[1.0, -2.0]);
        let p = ReducedProblem::new(
            a,
            v_star.clone(),
            Vec::new(),
            &ContactParams::default(),
            0.01,
        )
        .unwrap();
        let r = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.v, v_star);
    }

    #[test]
    fn frictionless_contact_matches_closed_form() {
        // single particle falling into a contact: stationarity gives
        // gamma_n = m (v_hat_n - v*_n) / (m R_n + 1) when positive
        let mass = 2.0;
        let v_hat = Vector3::new(0.0, 0.0, 0.05);
        let p = single_contact_problem(mass, Vector3::new(0.0, 0.0, -1.0), 0.0, v_hat);
        let r_n = p.constraints[0].r.z;
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        let gamma_n = mass * (v_hat.z - (-1.0)) / (mass * r_n + 1.0);
        let v_n = -1.0 + gamma_n / mass;
        assert!((result.impulses[0].z - gamma_n).abs() < 1e-9 * gamma_n);
        assert!((result.v[2] - v_n).abs() < 1e-9);
        assert!(result.impulses[0].xy().norm() == 0.0);
        let report = check_optimality(&p, &result);
        assert!(report.satisfied(1e-6));
    }

    #[test]
    fn separating_contact_applies_no_impulse() {
        // moving away faster than the bias asks: impulse-free
        let p = single_contact_problem(1.0, Vector3::new(0.0, 0.0, 1.0), 0.5, Vector3::zeros());
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        assert_eq!(result.impulses[0], Vector3::zeros());
        assert!((result.v[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sticking_contact_pins_the_tangential_velocity() {
        // slow slide with high friction: the optimum sticks, leaving only
        // the tiny compliant drift R_t allows
        let p = single_contact_problem(
            1.0,
            Vector3::new(0.1, 0.0, -1.0),
            2.0,
            Vector3::new(0.0, 0.0, 0.0),
        );
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        let report = check_optimality(&p, &result);
        assert!(report.satisfied(1e-6));
        // impulse strictly inside the cone means sticking
        let g = result.impulses[0];
        assert!(g.xy().norm() < 2.0 * g.z - 1e-9);
        assert!(result.v[0].abs() < 1e-3);
    }

    #[test]
    fn sliding_contact_lands_on_the_cone_boundary() {
        // fast slide with low friction: the impulse saturates the cone
        let p = single_contact_problem(
            1.0,
            Vector3::new(5.0, 0.0, -1.0),
            0.2,
            Vector3::new(0.0, 0.0, 0.0),
        );
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        let report = check_optimality(&p, &result);
        assert!(report.satisfied(1e-6));
        let g = result.impulses[0];
        assert!((g.xy().norm() - 0.2 * g.z).abs() < 1e-9 * g.z);
        // friction opposes the slide
        assert!(g.x < 0.0);
        assert!(result.v[0] > 0.0 && result.v[0] < 5.0);
    }

    #[test]
    fn bilateral_constraint_matches_direct_formula() {
        // one bilateral row on a unit mass: gamma = R^-1 (v_hat - v) at the
        // optimum of 1/2|v - v*|^2 + 1/2 gamma^T R gamma
        let a = DMatrix::identity(3, 3);
        let v_star = DVector::from_column_slice(&[0.0, 0.0, 0.0]);
        let mut p = ReducedProblem::new(
            a,
            v_star,
            vec![(
                Cone::Bilateral,
                DMatrix::identity(3, 3),
                Vector3::new(0.01, 0.0, 0.0),
            )],
            &ContactParams::default(),
            0.01,
        )
        .unwrap();
        // pin the regularization to the documented example value
        p.constraints[0].r = Vector3::new(0.1, 0.1, 0.1);
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        // v solves (I + R^-1) v = R^-1 v_hat -> v = 0.01/1.1, and
        // gamma = (v_hat - v)/R
        let v_expect = 0.01 / 1.1;
        let gamma_expect = (0.01 - v_expect) / 0.1;
        assert!((result.v[0] - v_expect).abs() < 1e-12);
        assert!((result.impulses[0].x - gamma_expect).abs() < 1e-10);
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let p = single_contact_problem(
            1.5,
            Vector3::new(1.0, -0.3, -2.0),
            0.7,
            Vector3::new(0.0, 0.0, 0.1),
        );
        let params = SolverParams::default();
        let cold = solve_reduced(&p, &params, None).unwrap();
        let warm = solve_reduced(&p, &params, Some(&cold.impulses)).unwrap();
        assert!(warm.iterations <= cold.iterations);
        let scale = cold.v.norm().max(1.0);
        assert!((warm.v - &cold.v).norm() <= 10.0 * params.tolerance * scale);
        // restarting from the answer converges immediately
        assert!(warm.iterations <= 1);
    }

    #[test]
    fn cost_is_monotone_under_line_search() {
        let p = single_contact_problem(
            1.0,
            Vector3::new(3.0, 1.0, -4.0),
            0.9,
            Vector3::new(0.0, 0.0, 0.1),
        );
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        for w in result.costs.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "cost must not increase");
        }
        // gradient norms recorded every iteration plus the final state
        assert_eq!(result.grad_norms.len(), result.iterations + 1);
    }

    #[test]
    fn optimality_check_rejects_tampered_impulses() {
        let p = single_contact_problem(
            1.0,
            Vector3::new(0.5, 0.0, -1.0),
            0.5,
            Vector3::new(0.0, 0.0, 0.0),
        );
        let mut result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        assert!(check_optimality(&p, &result).satisfied(1e-6));
        result.impulses[0].z *= 1.5;
        let report = check_optimality(&p, &result);
        assert!(!report.satisfied(1e-6));
    }

    #[test]
    fn iteration_cap_reports_nonconvergence() {
        let p = single_contact_problem(
            1.0,
            Vector3::new(2.0, 1.0, -3.0),
            0.8,
            Vector3::new(0.0, 0.0, 0.1),
        );
        let params = SolverParams {
            max_iterations: 0,
            ..SolverParams::default()
        };
        match solve_reduced(&p, &params, None) {
            Err(Error::SolverNonConvergence { iterations, .. }) => assert_eq!(iterations, 0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn two_body_coupling_through_one_contact() {
        // two unit masses sharing a contact row: impulse transfers momentum
        // between them and the total is conserved
        let a = DMatrix::identity(6, 6);
        let v_star = DVector::from_column_slice(&[0.0, 0.0, -1.0, 0.0, 0.0, 1.0]);
        let mut j = DMatrix::zeros(3, 6);
        // relative normal velocity: v_a . z - v_b . z
        j[(0, 0)] = 1.0;
        j[(0, 3)] = -1.0;
        j[(1, 1)] = 1.0;
        j[(1, 4)] = -1.0;
        j[(2, 2)] = 1.0;
        j[(2, 5)] = -1.0;
        let p = ReducedProblem::new(
            a,
            v_star,
            vec![(Cone::Friction { mu: 0.5 }, j, Vector3::zeros())],
            &ContactParams::default(),
            0.01,
        )
        .unwrap();
        let result = solve_reduced(&p, &SolverParams::default(), None).unwrap();
        assert!(check_optimality(&p, &result).satisfied(1e-6));
        // approaching at 2 m/s: the contact pushes them apart equally
        let vz_a = result.v[2];
        let vz_b = result.v[5];
        assert!((vz_a + vz_b).abs() < 1e-9, "momentum exchange is equal and opposite");
        assert!(vz_a > -1.0 && vz_b < 1.0);
    }
}
