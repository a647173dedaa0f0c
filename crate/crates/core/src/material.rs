//! Rotation-lagged corotational material for linear tets.
//!
//! The per-element rotation is frozen at the start of each step (taken from
//! the polar decomposition of the previous configuration's deformation
//! gradient), which makes the strain
//!
//! ```text
//! E = 1/2 (R^T F + F^T R) - I
//! ```
//!
//! linear in F and the energy density
//!
//! ```text
//! psi = mu ||E||_F^2 + lambda/2 tr(E)^2
//! ```
//!
//! quadratic, with a constant positive-semidefinite Hessian
//!
//! ```text
//! d2psi/dF_ij dF_kl = mu (d_ik d_jl + R_il R_kj) + lambda R_ij R_kl.
//! ```
//!
//! Forces are therefore affine in the configuration within a step, which is
//! what lets the stepper reach its momentum balance in a single linear
//! solve.

use crate::error::{Error, Result};
use crate::mesh::{deformation_gradient, vertex_block_pattern, ElementGeometry, TetMesh};
use crate::sparse::BlockSparseSym;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

/// First Lame parameter pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LameParams {
    pub mu: f64,
    pub lambda: f64,
}

impl LameParams {
    /// Convert Young's modulus and Poisson's ratio. Poisson's ratio must lie
    /// in `[0, 0.5)`; incompressible and auxetic inputs are rejected.
    pub fn from_young_poisson(young: f64, poisson: f64) -> Result<Self> {
        if !(young > 0.0) {
            return Err(Error::InvalidMaterial(format!(
                "Young's modulus must be positive, got {young}"
            )));
        }
        if !(0.0..0.5).contains(&poisson) {
            return Err(Error::InvalidMaterial(format!(
                "Poisson's ratio must lie in [0, 0.5), got {poisson}"
            )));
        }
        Ok(LameParams {
            mu: young / (2.0 * (1.0 + poisson)),
            lambda: young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson)),
        })
    }
}

/// Mass- and stiffness-proportional damping coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayleighParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RayleighParams {
    fn default() -> Self {
        RayleighParams {
            alpha: 0.0,
            beta: 0.01,
        }
    }
}

impl RayleighParams {
    pub fn none() -> Self {
        RayleighParams {
            alpha: 0.0,
            beta: 0.0,
        }
    }
}

/// Per-element lagged rotations. Fresh bodies start at identity.
#[derive(Debug, Clone)]
pub struct MaterialState {
    rotations: Vec<Matrix3<f64>>,
}

impl MaterialState {
    pub fn rest(n_elements: usize) -> Self {
        MaterialState {
            rotations: vec![Matrix3::identity(); n_elements],
        }
    }

    pub fn from_rotations(rotations: Vec<Matrix3<f64>>) -> Self {
        MaterialState { rotations }
    }

    pub fn rotation(&self, e: usize) -> &Matrix3<f64> {
        &self.rotations[e]
    }

    pub fn rotations(&self) -> &[Matrix3<f64>] {
        &self.rotations
    }
}

/// Rotation factor of `F = R S` by the scaled Newton iteration
/// `X <- (zeta X + zeta^-1 X^-T) / 2`, `zeta = |det X|^(-1/3)`.
/// Signals inversion for `det F <= 1e-10` instead of producing a reflection.
pub fn polar_rotation(f: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let det = f.determinant();
    if det <= 1e-10 {
        return Err(Error::Inverted { det });
    }
    let mut x = *f;
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let inv_t = match x.try_inverse() {
            Some(inv) => inv.transpose(),
            None => return Err(Error::Inverted { det }),
        };
        let zeta = x.determinant().abs().powf(-1.0 / 3.0);
        let next = (x * zeta + inv_t / zeta) * 0.5;
        residual = (next - x).norm();
        x = next;
        if residual <= 1e-12 {
            return Ok(x);
        }
    }
    Err(Error::PolarNonConvergence { residual })
}

/// Corotated small strain `E = 1/2 (R^T F + F^T R) - I`.
pub fn corotated_strain(f: &Matrix3<f64>, r_hat: &Matrix3<f64>) -> Matrix3<f64> {
    let rtf = r_hat.transpose() * f;
    (rtf + rtf.transpose()) * 0.5 - Matrix3::identity()
}

/// Energy density `mu ||E||^2 + lambda/2 tr(E)^2`.
pub fn energy_density(f: &Matrix3<f64>, r_hat: &Matrix3<f64>, lame: &LameParams) -> f64 {
    let e = corotated_strain(f, r_hat);
    let tr = e.trace();
    lame.mu * e.norm_squared() + 0.5 * lame.lambda * tr * tr
}

/// First Piola stress `P = R (2 mu E + lambda tr(E) I)`.
pub fn first_piola(f: &Matrix3<f64>, r_hat: &Matrix3<f64>, lame: &LameParams) -> Matrix3<f64> {
    let e = corotated_strain(f, r_hat);
    r_hat * (e * (2.0 * lame.mu) + Matrix3::identity() * (lame.lambda * e.trace()))
}

/// Constant energy Hessian as a 9x9 matrix over row-major flattened F
/// (entry `(i, j)` of F maps to index `3 i + j`).
pub fn hessian_density(r_hat: &Matrix3<f64>, lame: &LameParams) -> SMatrix<f64, 9, 9> {
    let mut h = SMatrix::<f64, 9, 9>::zeros();
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    let mut v = lame.lambda * r_hat[(i, j)] * r_hat[(k, l)]
                        + lame.mu * r_hat[(i, l)] * r_hat[(k, j)];
                    if i == k && j == l {
                        v += lame.mu;
                    }
                    h[(3 * i + j, 3 * k + l)] = v;
                }
            }
        }
    }
    h
}

/// Total elastic energy at configuration `q`.
pub fn elastic_energy(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    q: &DVector<f64>,
    state: &MaterialState,
    lame: &LameParams,
) -> f64 {
    (0..mesh.n_elements())
        .map(|e| {
            let f = deformation_gradient(mesh, geom, e, q);
            geom.volume(e) * energy_density(&f, state.rotation(e), lame)
        })
        .sum()
}

/// Elastic force `-dE/dq`: vertex `m` of an element receives `-V P g_m`.
pub fn elastic_force(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    q: &DVector<f64>,
    state: &MaterialState,
    lame: &LameParams,
) -> DVector<f64> {
    let mut force = DVector::zeros(mesh.n_dofs());
    for (e, elem) in mesh.elements().iter().enumerate() {
        let f = deformation_gradient(mesh, geom, e, q);
        let p = first_piola(&f, state.rotation(e), lame);
        let g = geom.grads(e);
        for m in 0..4 {
            let fm = -geom.volume(e) * (p * g[m]);
            let mut rows = force.fixed_rows_mut::<3>(3 * elem[m]);
            rows += fm;
        }
    }
    force
}

/// Elastic force together with the constant stiffness `K = d2E/dq2`.
///
/// The 3x3 coupling block of vertices `(m, n)` contracts the constant
/// Hessian with the shape gradients and collapses to
///
/// ```text
/// K_mn = V [ mu (g_m . g_n) I + mu (R g_n)(R g_m)^T + lambda (R g_m)(R g_n)^T ]
/// ```
///
/// so assembly is a handful of outer products per pair. Within a step
/// (fixed rotations) forces stay affine: `f(q) = f(q0) - K (q - q0)`.
pub fn elastic_force_and_stiffness(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    q: &DVector<f64>,
    state: &MaterialState,
    lame: &LameParams,
) -> (DVector<f64>, BlockSparseSym) {
    let force = elastic_force(mesh, geom, q, state, lame);
    let mut k = vertex_block_pattern(mesh);
    let mut block = DMatrix::zeros(3, 3);
    for (e, elem) in mesh.elements().iter().enumerate() {
        let vol = geom.volume(e);
        let r = state.rotation(e);
        let g = geom.grads(e);
        let rg: [Vector3<f64>; 4] = [r * g[0], r * g[1], r * g[2], r * g[3]];
        for m in 0..4 {
            for n in 0..=m {
                let diag = lame.mu * g[m].dot(&g[n]);
                for i in 0..3 {
                    for j in 0..3 {
                        let mut v =
                            lame.mu * rg[n][i] * rg[m][j] + lame.lambda * rg[m][i] * rg[n][j];
                        if i == j {
                            v += diag;
                        }
                        block[(i, j)] = vol * v;
                    }
                }
                k.add_block(elem[m], elem[n], &block);
            }
        }
    }
    (force, k)
}

/// Rayleigh damping force `-(alpha M + beta K) v`.
pub fn damping_force(
    mass: &BlockSparseSym,
    stiffness: &BlockSparseSym,
    v: &DVector<f64>,
    rayleigh: &RayleighParams,
) -> DVector<f64> {
    let mut f = DVector::zeros(v.len());
    if rayleigh.alpha != 0.0 {
        f.axpy(-rayleigh.alpha, &mass.matvec(v), 1.0);
    }
    if rayleigh.beta != 0.0 {
        f.axpy(-rayleigh.beta, &stiffness.matvec(v), 1.0);
    }
    f
}

/// Refresh the lagged rotations from the configuration `q0`. Elements whose
/// gradient signals inversion (or fails to converge) keep their previous
/// rotation; the count of such elements is returned for diagnostics.
pub fn update_lagged_rotation(
    mesh: &TetMesh,
    geom: &ElementGeometry,
    q0: &DVector<f64>,
    state: &MaterialState,
) -> (MaterialState, usize) {
    let mut rotations = Vec::with_capacity(mesh.n_elements());
    let mut kept = 0;
    for e in 0..mesh.n_elements() {
        let f = deformation_gradient(mesh, geom, e, q0);
        match polar_rotation(&f) {
            Ok(r) => rotations.push(r),
            Err(_) => {
                rotations.push(*state.rotation(e));
                kept += 1;
            }
        }
    }
    (MaterialState::from_rotations(rotations), kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_element_geometry, TetMesh};
    use crate::shapes;
    use nalgebra::Rotation3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-3.0..3.0);
        *Rotation3::from_scaled_axis(axis.normalize() * angle).matrix()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, scale: f64) -> Matrix3<f64> {
        Matrix3::from_fn(|_, _| rng.gen_range(-scale..scale))
    }

    #[test]
    fn lame_conversion_known_values() {
        let l = LameParams::from_young_poisson(1.0, 0.25).unwrap();
        assert!((l.mu - 0.4).abs() < 1e-15);
        assert!((l.lambda - 0.4).abs() < 1e-15);
        let l = LameParams::from_young_poisson(2e10, 0.3).unwrap();
        assert!((l.mu - 7.6923e9).abs() < 1e6);
        assert!((l.lambda - 1.1538e10).abs() < 1e6);
    }

    #[test]
    fn lame_rejects_out_of_range() {
        assert!(LameParams::from_young_poisson(1.0, 0.5).is_err());
        assert!(LameParams::from_young_poisson(1.0, -0.1).is_err());
        assert!(LameParams::from_young_poisson(0.0, 0.3).is_err());
    }

    #[test]
    fn polar_of_rotation_is_identity_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            let out = polar_rotation(&r).unwrap();
            assert!((out - r).norm() < 1e-11);
        }
    }

    #[test]
    fn polar_factor_is_rotation_with_spd_stretch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            // positive-determinant F = R * S with S SPD
            let r = random_rotation(&mut rng);
            let a = random_matrix(&mut rng, 1.0);
            let s = a * a.transpose() + Matrix3::identity() * 0.5;
            let f = r * s;
            let out = polar_rotation(&f).unwrap();
            assert!((out.transpose() * out - Matrix3::identity()).norm() < 1e-10);
            assert!((out.determinant() - 1.0).abs() < 1e-10);
            assert!((out - r).norm() < 1e-9, "polar must recover the rotation");
            // stretch factor is symmetric positive definite
            let stretch = out.transpose() * f;
            assert!((stretch - stretch.transpose()).norm() < 1e-9);
            assert!(stretch.symmetric_eigen().eigenvalues.min() > 0.0);
        }
    }

    #[test]
    fn polar_signals_inversion() {
        let f = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -0.5));
        assert!(matches!(polar_rotation(&f), Err(Error::Inverted { .. })));
        let f = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 1e-12));
        assert!(matches!(polar_rotation(&f), Err(Error::Inverted { .. })));
    }

    #[test]
    fn energy_and_stress_known_values() {
        let lame = LameParams { mu: 1.0, lambda: 1.0 };
        let r = Matrix3::identity();
        let f = Matrix3::from_diagonal(&Vector3::new(1.1, 1.0, 1.0));
        assert!((energy_density(&f, &r, &lame) - 0.015).abs() < 1e-15);
        let p = first_piola(&f, &r, &lame);
        let expect = Matrix3::from_diagonal(&Vector3::new(0.3, 0.1, 0.1));
        assert!((p - expect).norm() < 1e-14);
    }

    #[test]
    fn pure_rotation_is_stress_free() {
        let lame = LameParams { mu: 3.0, lambda: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let r = random_rotation(&mut rng);
            // lagged rotation equals the actual rotation: strain vanishes
            assert!(corotated_strain(&r, &r).norm() < 1e-13);
            assert!(energy_density(&r, &r, &lame).abs() < 1e-13);
            assert!(first_piola(&r, &r, &lame).norm() < 1e-12);
        }
    }

    #[test]
    fn hessian_entries_at_identity_rotation() {
        let lame = LameParams { mu: 2.0, lambda: 3.0 };
        let h = hessian_density(&Matrix3::identity(), &lame);
        for i in 0..3 {
            for j in 0..3 {
                let idx = 3 * i + j;
                if i == j {
                    assert!((h[(idx, idx)] - (2.0 * lame.mu + lame.lambda)).abs() < 1e-15);
                } else {
                    assert!((h[(idx, idx)] - lame.mu).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_and_psd_for_random_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let lame = LameParams {
                mu: rng.gen_range(0.01..10.0),
                lambda: rng.gen_range(0.0..10.0),
            };
            let r = random_rotation(&mut rng);
            let h = hessian_density(&r, &lame);
            assert!((h - h.transpose()).norm() < 1e-13);
            let eig = nalgebra::DMatrix::from_iterator(9, 9, h.iter().copied()).symmetric_eigen();
            let min = eig.eigenvalues.min();
            let max = eig.eigenvalues.max();
            assert!(min >= -1e-12 * max.max(1.0), "Hessian must be PSD");
        }
    }

    #[test]
    fn symmetric_square_trace_identity_is_nonnegative() {
        // tr(M^2) + tr(M^T M) = 2 tr(sym(M)^2) >= 0, the inequality behind
        // the Hessian's semidefiniteness
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..1000 {
            let m = random_matrix(&mut rng, 2.0);
            let lhs = (m * m).trace() + (m.transpose() * m).trace();
            let sym = (m + m.transpose()) * 0.5;
            let rhs = 2.0 * (sym * sym).trace();
            assert!((lhs - rhs).abs() <= 1e-12 * m.norm_squared().max(1.0));
            assert!(lhs >= -1e-12 * m.norm_squared());
        }
    }

    #[test]
    fn piola_matches_energy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let lame = LameParams {
                mu: rng.gen_range(0.1..5.0),
                lambda: rng.gen_range(0.0..5.0),
            };
            let r = random_rotation(&mut rng);
            let f = Matrix3::identity() + random_matrix(&mut rng, 0.3);
            let p = first_piola(&f, &r, &lame);
            let h = 1e-5 * f.norm();
            for i in 0..3 {
                for j in 0..3 {
                    let mut fp = f;
                    let mut fm = f;
                    fp[(i, j)] += h;
                    fm[(i, j)] -= h;
                    let fd =
                        (energy_density(&fp, &r, &lame) - energy_density(&fm, &r, &lame)) / (2.0 * h);
                    assert!(
                        (p[(i, j)] - fd).abs() <= 1e-6 * p.norm().max(1.0),
                        "stress component ({i},{j}) disagrees with finite difference"
                    );
                }
            }
        }
    }

    #[test]
    fn hessian_matches_piola_derivative() {
        // P is affine in F, so differences recover the Hessian exactly
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let lame = LameParams { mu: 1.7, lambda: 0.9 };
        let r = random_rotation(&mut rng);
        let h = hessian_density(&r, &lame);
        let f = Matrix3::identity() + random_matrix(&mut rng, 0.2);
        let step = 1e-3;
        for k in 0..3 {
            for l in 0..3 {
                let mut fp = f;
                let mut fm = f;
                fp[(k, l)] += step;
                fm[(k, l)] -= step;
                let dp = (first_piola(&fp, &r, &lame) - first_piola(&fm, &r, &lame)) / (2.0 * step);
                for i in 0..3 {
                    for j in 0..3 {
                        assert!((h[(3 * i + j, 3 * k + l)] - dp[(i, j)]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    fn test_body() -> (TetMesh, ElementGeometry) {
        let (v, e) = shapes::cube_lattice([1, 1, 1], [1.0, 1.0, 1.0]);
        let mesh = TetMesh::new(v, e, 1000.0).unwrap();
        let geom = build_element_geometry(&mesh).unwrap();
        (mesh, geom)
    }

    fn random_state(rng: &mut ChaCha8Rng, n: usize) -> MaterialState {
        MaterialState::from_rotations((0..n).map(|_| random_rotation(rng)).collect())
    }

    #[test]
    fn force_matches_energy_finite_difference() {
        let (mesh, geom) = test_body();
        let lame = LameParams { mu: 2.0, lambda: 1.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..5 {
            let state = random_state(&mut rng, mesh.n_elements());
            let mut q = mesh.rest_configuration();
            for x in q.iter_mut() {
                *x += rng.gen_range(-0.15..0.15);
            }
            let f = elastic_force(&mesh, &geom, &q, &state, &lame);
            let h = 1e-6;
            let fnorm = f.norm().max(1.0);
            for d in 0..mesh.n_dofs() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[d] += h;
                qm[d] -= h;
                let fd = -(elastic_energy(&mesh, &geom, &qp, &state, &lame)
                    - elastic_energy(&mesh, &geom, &qm, &state, &lame))
                    / (2.0 * h);
                assert!(
                    (f[d] - fd).abs() <= 1e-6 * fnorm,
                    "force dof {d}: {} vs fd {}",
                    f[d],
                    fd
                );
            }
        }
    }

    #[test]
    fn stiffness_matches_hessian_contraction_oracle() {
        // contract the 9x9 density Hessian with shape gradients per element
        // and compare against the closed-form assembly
        let (mesh, geom) = test_body();
        let lame = LameParams { mu: 1.3, lambda: 2.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let state = random_state(&mut rng, mesh.n_elements());
        let q = mesh.rest_configuration();
        let (_, k) = elastic_force_and_stiffness(&mesh, &geom, &q, &state, &lame);
        let n = mesh.n_dofs();
        let mut oracle = DMatrix::zeros(n, n);
        for (e, elem) in mesh.elements().iter().enumerate() {
            let h = hessian_density(state.rotation(e), &lame);
            let g = geom.grads(e);
            let vol = geom.volume(e);
            for m in 0..4 {
                for n_ in 0..4 {
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut sum = 0.0;
                            for b in 0..3 {
                                for d in 0..3 {
                                    sum += h[(3 * i + b, 3 * j + d)] * g[m][b] * g[n_][d];
                                }
                            }
                            oracle[(3 * elem[m] + i, 3 * elem[n_] + j)] += vol * sum;
                        }
                    }
                }
            }
        }
        let dense = k.dense();
        assert!(
            (&dense - &oracle).norm() <= 1e-12 * oracle.norm(),
            "closed-form stiffness must equal the Hessian contraction"
        );
    }

    #[test]
    fn force_is_affine_with_assembled_stiffness() {
        let (mesh, geom) = test_body();
        let lame = LameParams { mu: 4.0, lambda: 2.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let state = random_state(&mut rng, mesh.n_elements());
        let q0 = mesh.rest_configuration();
        let (f0, k) = elastic_force_and_stiffness(&mesh, &geom, &q0, &state, &lame);
        for _ in 0..10 {
            let dq = DVector::from_fn(mesh.n_dofs(), |_, _| rng.gen_range(-0.5..0.5));
            let q = &q0 + &dq;
            let f = elastic_force(&mesh, &geom, &q, &state, &lame);
            let predicted = &f0 - &k.matvec(&dq);
            let scale = f.norm().max(f0.norm()).max(1.0);
            assert!(
                (&f - &predicted).norm() <= 1e-12 * scale,
                "elastic force must be affine while rotations are lagged"
            );
        }
    }

    #[test]
    fn stiffness_is_psd_and_annihilates_translations() {
        let (mesh, geom) = test_body();
        let lame = LameParams { mu: 1.0, lambda: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let state = random_state(&mut rng, mesh.n_elements());
        let q = mesh.rest_configuration();
        let (_, k) = elastic_force_and_stiffness(&mesh, &geom, &q, &state, &lame);
        let eig = k.dense().symmetric_eigen();
        let max = eig.eigenvalues.max();
        assert!(eig.eigenvalues.min() >= -1e-12 * max);
        // rigid translation produces no force
        for axis in 0..3 {
            let t = DVector::from_fn(mesh.n_dofs(), |i, _| if i % 3 == axis { 1.0 } else { 0.0 });
            assert!(k.matvec(&t).norm() <= 1e-12 * max);
        }
    }

    #[test]
    fn damping_force_combines_mass_and_stiffness() {
        let (mesh, geom) = test_body();
        let lame = LameParams { mu: 1.0, lambda: 1.0 };
        let state = MaterialState::rest(mesh.n_elements());
        let q = mesh.rest_configuration();
        let m = crate::mesh::assemble_mass_matrix(&mesh, &geom);
        let (_, k) = elastic_force_and_stiffness(&mesh, &geom, &q, &state, &lame);
        let ray = RayleighParams {
            alpha: 0.7,
            beta: 0.02,
        };
        let v = DVector::from_fn(mesh.n_dofs(), |i, _| (i as f64 * 0.31).cos());
        let f = damping_force(&m, &k, &v, &ray);
        let expect = -(m.matvec(&v) * 0.7 + k.matvec(&v) * 0.02);
        assert!((f - expect).norm() < 1e-12);
    }

    #[test]
    fn lagged_rotation_tracks_rigid_rotation() {
        let (mesh, geom) = test_body();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let r = random_rotation(&mut rng);
        let mut q = DVector::zeros(mesh.n_dofs());
        for (i, x) in mesh.vertices().iter().enumerate() {
            q.fixed_rows_mut::<3>(3 * i).copy_from(&(r * x));
        }
        let state0 = MaterialState::rest(mesh.n_elements());
        let (state, kept) = update_lagged_rotation(&mesh, &geom, &q, &state0);
        assert_eq!(kept, 0);
        for e in 0..mesh.n_elements() {
            assert!((state.rotation(e) - r).norm() < 1e-9);
        }
        // pure stretch keeps the identity
        let mut q = mesh.rest_configuration();
        for i in 0..mesh.n_vertices() {
            q[3 * i] *= 1.4;
        }
        let (state, kept) = update_lagged_rotation(&mesh, &geom, &q, &state0);
        assert_eq!(kept, 0);
        for e in 0..mesh.n_elements() {
            assert!((state.rotation(e) - Matrix3::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn inverted_elements_keep_previous_rotation() {
        let (mesh, geom) = test_body();
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let r = random_rotation(&mut rng);
        let state0 = MaterialState::from_rotations(vec![r; mesh.n_elements()]);
        // collapse the whole mesh onto a plane: every element inverts
        let mut q = mesh.rest_configuration();
        for i in 0..mesh.n_vertices() {
            q[3 * i + 2] = 0.0;
        }
        let (state, kept) = update_lagged_rotation(&mesh, &geom, &q, &state0);
        assert_eq!(kept, mesh.n_elements());
        for e in 0..mesh.n_elements() {
            assert_eq!(state.rotation(e), &r);
        }
    }
}
