//! Right-looking block Cholesky that records a trailing Schur complement.
//!
//! The matrix is permuted so constrained blocks trail, then eliminated
//! column by column. The moment elimination crosses the partition boundary,
//! the not-yet-factored trailing submatrix equals the condensed system
//!
//! ```text
//! S = A_pp - A_pn A_nn^-1 A_np = A_pp - L_pn L_pn^T = L_pp L_pp^T
//! ```
//!
//! so the dense condensed matrix falls out of the factorization that the
//! free-motion solve needs anyway; no extra triangular sweeps are spent on
//! it. The stored factor then serves three roles: full solves, the condensed
//! matrix for the contact stage, and the back-substitution that maps a
//! trailing-partition correction onto the leading partition.

use super::matrix::BlockSparseSym;
use super::ordering::PartitionPermutation;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Lower Cholesky factor of a small dense SPD block. On failure returns the
/// local index of the offending pivot.
fn dense_chol_lower(a: &DMatrix<f64>) -> std::result::Result<DMatrix<f64>, usize> {
    let n = a.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Factorization artifact: block factor `L` in partitioned order, the dense
/// Schur complement of the trailing partition, and the permutation that
/// defines the partitions.
#[derive(Debug, Clone)]
pub struct CholeskyWithSchur {
    perm: PartitionPermutation,
    l: BlockSparseSym,
    schur: DMatrix<f64>,
    fill_blocks: usize,
}

/// Factor `a` under the partition permutation, recording the trailing Schur
/// complement on the way. Fails with the scalar pivot index if `a` is not
/// numerically positive definite.
pub fn factorize_with_schur(
    a: &BlockSparseSym,
    perm: &PartitionPermutation,
) -> Result<CholeskyWithSchur> {
    assert_eq!(a.n_blocks(), perm.block_new_to_old().len());
    let mut m = a.permuted(perm.block_new_to_old());
    let nb = m.n_blocks();
    let boundary = perm.n_blocks_leading();
    let input_blocks = m.stored_blocks();
    let mut schur = None;

    for k in 0..nb {
        if k == boundary {
            schur = Some(gather_trailing(&m, boundary, perm.m_p()));
        }
        let sk = m.sizes()[k];
        let akk = m
            .col(k)
            .get(&k)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(sk, sk));
        let lkk = dense_chol_lower(&akk).map_err(|local| Error::NonPositivePivot {
            block: k,
            dof: m.offset(k) + local,
        })?;

        // divide the sub-diagonal column blocks: L_ik = A_ik L_kk^-T
        let below: Vec<(usize, DMatrix<f64>)> = {
            let colk = m.col_mut(k);
            colk.insert(k, lkk.clone());
            let keys: Vec<usize> = colk.keys().copied().filter(|&i| i > k).collect();
            let mut v = Vec::with_capacity(keys.len());
            for i in keys {
                let b = colk.get_mut(&i).unwrap();
                let lik = lkk
                    .solve_lower_triangular(&b.transpose())
                    .expect("positive diagonal")
                    .transpose();
                *b = lik.clone();
                v.push((i, lik));
            }
            v
        };

        // right-looking update of the remaining submatrix
        for (ii, (i, lik)) in below.iter().enumerate() {
            for (j, ljk) in &below[..=ii] {
                let upd = lik * ljk.transpose();
                let col = m.col_mut(*j);
                match col.get_mut(i) {
                    Some(entry) => *entry -= upd,
                    None => {
                        col.insert(*i, -upd);
                    }
                }
            }
        }
    }
    let schur = schur.unwrap_or_else(|| gather_trailing(&m, boundary, perm.m_p()));
    let fill_blocks = m.stored_blocks().saturating_sub(input_blocks);
    Ok(CholeskyWithSchur {
        perm: perm.clone(),
        l: m,
        schur,
        fill_blocks,
    })
}

/// [`factorize_with_schur`] with one retry after a diagonal boost of
/// `1e-12 * trace(A) / dim`, for matrices that sit on the edge of positive
/// definiteness. Returns whether the boost was applied.
pub fn factorize_with_schur_jitter(
    a: &BlockSparseSym,
    perm: &PartitionPermutation,
) -> Result<(CholeskyWithSchur, bool)> {
    match factorize_with_schur(a, perm) {
        Ok(f) => Ok((f, false)),
        Err(Error::NonPositivePivot { .. }) => {
            let mut boosted = a.clone();
            boosted.add_diagonal(1e-12 * a.trace() / a.dim().max(1) as f64);
            factorize_with_schur(&boosted, perm).map(|f| (f, true))
        }
        Err(e) => Err(e),
    }
}

fn gather_trailing(m: &BlockSparseSym, boundary: usize, m_p: usize) -> DMatrix<f64> {
    let base = if boundary < m.n_blocks() {
        m.offset(boundary)
    } else {
        m.dim()
    };
    let mut out = DMatrix::zeros(m_p, m_p);
    for j in boundary..m.n_blocks() {
        for (&i, b) in m.col(j) {
            let (oi, oj) = (m.offset(i) - base, m.offset(j) - base);
            for c in 0..b.ncols() {
                for r in 0..b.nrows() {
                    out[(oi + r, oj + c)] = b[(r, c)];
                    out[(oj + c, oi + r)] = b[(r, c)];
                }
            }
        }
    }
    out
}

impl CholeskyWithSchur {
    pub fn perm(&self) -> &PartitionPermutation {
        &self.perm
    }

    /// Dense Schur complement of the trailing (participating) partition, in
    /// partitioned order. With an empty leading partition this is the whole
    /// matrix untouched; with an empty trailing partition it is 0x0.
    pub fn schur(&self) -> &DMatrix<f64> {
        &self.schur
    }

    /// Block fill entries created beyond the input pattern, for regression
    /// tracking of ordering quality.
    pub fn fill_blocks(&self) -> usize {
        self.fill_blocks
    }

    /// Solve `A x = b` with `b` and `x` in original (unpermuted) ordering.
    pub fn solve_full(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = self.perm.permute_vec(b);
        let nb = self.l.n_blocks();
        // forward: L y = b
        for j in 0..nb {
            let (oj, sj) = (self.l.offset(j), self.l.sizes()[j]);
            let ljj = self.l.block(j, j).expect("factored diagonal");
            let yj = ljj
                .solve_lower_triangular(&x.rows(oj, sj).into_owned())
                .expect("positive diagonal");
            x.rows_mut(oj, sj).copy_from(&yj);
            for (&i, lij) in self.l.col(j) {
                if i == j {
                    continue;
                }
                let (oi, si) = (self.l.offset(i), self.l.sizes()[i]);
                let mut xi = x.rows_mut(oi, si);
                xi.gemv(-1.0, lij, &yj, 1.0);
            }
        }
        // backward: L^T x = y
        for j in (0..nb).rev() {
            let (oj, sj) = (self.l.offset(j), self.l.sizes()[j]);
            let mut acc = x.rows(oj, sj).into_owned();
            for (&i, lij) in self.l.col(j) {
                if i == j {
                    continue;
                }
                let (oi, si) = (self.l.offset(i), self.l.sizes()[i]);
                let xi = x.rows(oi, si).into_owned();
                acc.gemv_tr(-1.0, lij, &xi, 1.0);
            }
            let ljj = self.l.block(j, j).unwrap();
            let xj = ljj
                .tr_solve_lower_triangular(&acc)
                .expect("positive diagonal");
            x.rows_mut(oj, sj).copy_from(&xj);
        }
        self.perm.unpermute_vec(&x)
    }

    /// Given a trailing-partition correction (partitioned order, length
    /// `m_p`), compute the leading-partition response
    /// `dv_n = -A_nn^-1 A_np dv_p` from the stored factor blocks.
    pub fn recover_nonparticipating(&self, dv_p: &DVector<f64>) -> DVector<f64> {
        let m_n = self.perm.m_n();
        assert_eq!(dv_p.len(), self.perm.m_p());
        let boundary = self.perm.n_blocks_leading();
        // w = L_pn^T dv_p
        let mut w = DVector::zeros(m_n);
        for j in 0..boundary {
            let (oj, sj) = (self.l.offset(j), self.l.sizes()[j]);
            for (&i, lij) in self.l.col(j) {
                if i < boundary {
                    continue;
                }
                let (oi, si) = (self.l.offset(i) - m_n, self.l.sizes()[i]);
                let seg = dv_p.rows(oi, si).into_owned();
                let mut wj = w.rows_mut(oj, sj);
                wj.gemv_tr(1.0, lij, &seg, 1.0);
            }
        }
        // solve L_nn^T x = w restricted to the leading partition
        for j in (0..boundary).rev() {
            let (oj, sj) = (self.l.offset(j), self.l.sizes()[j]);
            let mut acc = w.rows(oj, sj).into_owned();
            for (&i, lij) in self.l.col(j) {
                if i == j || i >= boundary {
                    continue;
                }
                let (oi, si) = (self.l.offset(i), self.l.sizes()[i]);
                let xi = w.rows(oi, si).into_owned();
                acc.gemv_tr(-1.0, lij, &xi, 1.0);
            }
            let ljj = self.l.block(j, j).unwrap();
            let xj = ljj
                .tr_solve_lower_triangular(&acc)
                .expect("positive diagonal");
            w.rows_mut(oj, sj).copy_from(&xj);
        }
        -w
    }

    /// Assemble the full-dimension correction, original ordering, from a
    /// trailing-partition correction.
    pub fn expand_delta(&self, dv_p: &DVector<f64>) -> DVector<f64> {
        let dv_n = self.recover_nonparticipating(dv_p);
        let mut stacked = DVector::zeros(self.perm.dim());
        stacked.rows_mut(0, self.perm.m_n()).copy_from(&dv_n);
        stacked
            .rows_mut(self.perm.m_n(), self.perm.m_p())
            .copy_from(dv_p);
        self.perm.unpermute_vec(&stacked)
    }

    /// The factor itself, for debug dumps.
    pub fn factor(&self) -> &BlockSparseSym {
        &self.l
    }
}
