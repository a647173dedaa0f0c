//! Symmetric matrix stored as dense blocks on a block-sparse lower triangle.

use nalgebra::{DMatrix, DVector};
use std::collections::{BTreeMap, BTreeSet};

/// Symmetric block-sparse matrix.
///
/// Block `i` spans `sizes[i]` scalar rows/columns; only blocks `(i, j)` with
/// `i >= j` are stored. A stored block holds the values of rows `i`, columns
/// `j`; the mirrored block is implied by symmetry. Columns are kept in
/// ordered maps so the factorization can insert fill blocks in place.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparseSym {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    cols: Vec<BTreeMap<usize, DMatrix<f64>>>,
}

impl BlockSparseSym {
    /// Empty matrix (structurally zero) with the given block sizes.
    pub fn zeros(sizes: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0;
        for &s in &sizes {
            assert!(s > 0, "block sizes must be positive");
            offsets.push(acc);
            acc += s;
        }
        offsets.push(acc);
        let cols = vec![BTreeMap::new(); sizes.len()];
        BlockSparseSym { sizes, offsets, cols }
    }

    pub fn n_blocks(&self) -> usize {
        self.sizes.len()
    }

    /// Scalar dimension (sum of block sizes).
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Scalar offset of block `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Number of stored (lower-triangle) blocks.
    pub fn stored_blocks(&self) -> usize {
        self.cols.iter().map(|c| c.len()).sum()
    }

    /// Accumulate `block` onto entry `(i, j)`. Either triangle may be
    /// addressed; values land transposed in the stored lower triangle when
    /// `i < j`. Allocates the block if it is not yet present.
    pub fn add_block(&mut self, i: usize, j: usize, block: &DMatrix<f64>) {
        assert_eq!(block.nrows(), self.sizes[i]);
        assert_eq!(block.ncols(), self.sizes[j]);
        if i >= j {
            let entry = self.cols[j]
                .entry(i)
                .or_insert_with(|| DMatrix::zeros(self.sizes[i], self.sizes[j]));
            *entry += block;
        } else {
            let entry = self.cols[i]
                .entry(j)
                .or_insert_with(|| DMatrix::zeros(self.sizes[j], self.sizes[i]));
            *entry += block.transpose();
        }
    }

    /// Stored lower-triangle block `(i, j)`, `i >= j`.
    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        assert!(i >= j);
        self.cols[j].get(&i)
    }

    pub(crate) fn col(&self, j: usize) -> &BTreeMap<usize, DMatrix<f64>> {
        &self.cols[j]
    }

    pub(crate) fn col_mut(&mut self, j: usize) -> &mut BTreeMap<usize, DMatrix<f64>> {
        &mut self.cols[j]
    }

    /// y = A x using the symmetric completion of the stored triangle.
    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let mut y = DVector::zeros(self.dim());
        for j in 0..self.n_blocks() {
            let xj = x.rows(self.offsets[j], self.sizes[j]);
            for (&i, b) in &self.cols[j] {
                let oi = self.offsets[i];
                let si = self.sizes[i];
                {
                    let mut yi = y.rows_mut(oi, si);
                    yi.gemv(1.0, b, &xj, 1.0);
                }
                if i != j {
                    let xi = x.rows(oi, si).into_owned();
                    let mut yj = y.rows_mut(self.offsets[j], self.sizes[j]);
                    yj.gemv_tr(1.0, b, &xi, 1.0);
                }
            }
        }
        y
    }

    /// x' A x without forming A x separately.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        self.matvec(x).dot(x)
    }

    /// Dense symmetric copy, mostly for oracles and small-system tests.
    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..self.n_blocks() {
            for (&i, b) in &self.cols[j] {
                let (oi, oj) = (self.offsets[i], self.offsets[j]);
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

    /// Sum of scaled matrices over the union of their patterns. All terms
    /// must share block sizes.
    pub fn linear_combination(terms: &[(f64, &BlockSparseSym)]) -> BlockSparseSym {
        assert!(!terms.is_empty());
        let sizes = terms[0].1.sizes.clone();
        for (_, t) in terms {
            assert_eq!(t.sizes, sizes, "mismatched block structure");
        }
        let mut out = BlockSparseSym::zeros(sizes);
        for &(scale, term) in terms {
            if scale == 0.0 {
                continue;
            }
            for j in 0..term.n_blocks() {
                for (&i, b) in &term.cols[j] {
                    let entry = out.cols[j]
                        .entry(i)
                        .or_insert_with(|| DMatrix::zeros(term.sizes[i], term.sizes[j]));
                    *entry += b * scale;
                }
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        let mut t = 0.0;
        for j in 0..self.n_blocks() {
            if let Some(b) = self.cols[j].get(&j) {
                t += b.trace();
            }
        }
        t
    }

    /// Add `value` to every scalar diagonal entry.
    pub fn add_diagonal(&mut self, value: f64) {
        for j in 0..self.sizes.len() {
            let s = self.sizes[j];
            let entry = self.cols[j].entry(j).or_insert_with(|| DMatrix::zeros(s, s));
            for d in 0..s {
                entry[(d, d)] += value;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.n_blocks() {
            for (&i, b) in &self.cols[j] {
                let sq = b.iter().map(|v| v * v).sum::<f64>();
                acc += if i == j { sq } else { 2.0 * sq };
            }
        }
        acc.sqrt()
    }

    /// Symmetric permutation: block `i` of the result is block
    /// `new_to_old[i]` of `self`.
    pub fn permuted(&self, new_to_old: &[usize]) -> BlockSparseSym {
        assert_eq!(new_to_old.len(), self.n_blocks());
        let mut old_to_new = vec![usize::MAX; self.n_blocks()];
        for (new, &old) in new_to_old.iter().enumerate() {
            assert!(old_to_new[old] == usize::MAX, "permutation is not a bijection");
            old_to_new[old] = new;
        }
        let sizes: Vec<usize> = new_to_old.iter().map(|&o| self.sizes[o]).collect();
        let mut out = BlockSparseSym::zeros(sizes);
        for j in 0..self.n_blocks() {
            for (&i, b) in &self.cols[j] {
                let (ni, nj) = (old_to_new[i], old_to_new[j]);
                if ni >= nj {
                    out.cols[nj].insert(ni, b.clone());
                } else {
                    out.cols[ni].insert(nj, b.transpose());
                }
            }
        }
        out
    }

    /// Block adjacency from the stored off-diagonal pattern.
    pub fn block_adjacency(&self) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); self.n_blocks()];
        for j in 0..self.n_blocks() {
            for (&i, _) in &self.cols[j] {
                if i != j {
                    adj[i].insert(j);
                    adj[j].insert(i);
                }
            }
        }
        adj
    }

    /// Scalar lower-triangle entries `(row, col, value)` of the stored
    /// blocks, for external dumps. Zero entries inside blocks are kept.
    pub fn scalar_entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for j in 0..self.n_blocks() {
            for (&i, b) in &self.cols[j] {
                for c in 0..b.ncols() {
                    for r in 0..b.nrows() {
                        let (gr, gc) = (self.offsets[i] + r, self.offsets[j] + c);
                        if gr >= gc {
                            out.push((gr, gc, b[(r, c)]));
                        } else if i != j {
                            // upper part of an off-diagonal block mirrors to
                            // the lower triangle of the full matrix
                            out.push((gc, gr, b[(r, c)]));
                        }
                    }
                }
            }
        }
        out.sort_by_key(|&(r, c, _)| (c, r));
        out
    }
}
