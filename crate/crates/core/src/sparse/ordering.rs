//! Partition-respecting fill-reducing ordering.
//!
//! The tangent matrix is reordered so that blocks free of constraint coupling
//! come first and constrained blocks trail. Within each of the two ranges a
//! textbook minimum-degree heuristic runs on the block elimination graph; the
//! partition boundary itself is never crossed.

use std::collections::BTreeSet;

/// Permutation that maps degrees of freedom to `[non-participating |
/// participating]` order, at both block and scalar granularity.
#[derive(Debug, Clone)]
pub struct PartitionPermutation {
    block_new_to_old: Vec<usize>,
    block_old_to_new: Vec<usize>,
    n_blocks_leading: usize,
    scalar_new_to_old: Vec<usize>,
    scalar_old_to_new: Vec<usize>,
    m_n: usize,
    m_p: usize,
}

impl PartitionPermutation {
    /// Build from a block ordering. `block_new_to_old[k]` is the original
    /// index of the block placed at position `k`; the first
    /// `n_blocks_leading` positions form the non-participating partition.
    pub fn new(sizes: &[usize], block_new_to_old: Vec<usize>, n_blocks_leading: usize) -> Self {
        assert_eq!(block_new_to_old.len(), sizes.len());
        assert!(n_blocks_leading <= sizes.len());
        let nb = sizes.len();
        let mut block_old_to_new = vec![usize::MAX; nb];
        for (new, &old) in block_new_to_old.iter().enumerate() {
            assert!(block_old_to_new[old] == usize::MAX, "not a bijection");
            block_old_to_new[old] = new;
        }
        let mut old_offsets = Vec::with_capacity(nb);
        let mut acc = 0;
        for &s in sizes {
            old_offsets.push(acc);
            acc += s;
        }
        let dim = acc;
        let mut scalar_new_to_old = Vec::with_capacity(dim);
        let mut m_n = 0;
        for (pos, &old) in block_new_to_old.iter().enumerate() {
            for k in 0..sizes[old] {
                scalar_new_to_old.push(old_offsets[old] + k);
            }
            if pos < n_blocks_leading {
                m_n += sizes[old];
            }
        }
        let mut scalar_old_to_new = vec![0; dim];
        for (new, &old) in scalar_new_to_old.iter().enumerate() {
            scalar_old_to_new[old] = new;
        }
        PartitionPermutation {
            block_new_to_old,
            block_old_to_new,
            n_blocks_leading,
            scalar_new_to_old,
            scalar_old_to_new,
            m_n,
            m_p: dim - m_n,
        }
    }

    /// Identity ordering with the participating blocks moved to the back
    /// (stable within each partition).
    pub fn stable(sizes: &[usize], participating: &[bool]) -> Self {
        assert_eq!(sizes.len(), participating.len());
        let mut order: Vec<usize> = (0..sizes.len()).filter(|&i| !participating[i]).collect();
        let n_lead = order.len();
        order.extend((0..sizes.len()).filter(|&i| participating[i]));
        PartitionPermutation::new(sizes, order, n_lead)
    }

    pub fn block_new_to_old(&self) -> &[usize] {
        &self.block_new_to_old
    }

    pub fn block_old_to_new(&self) -> &[usize] {
        &self.block_old_to_new
    }

    pub fn n_blocks_leading(&self) -> usize {
        self.n_blocks_leading
    }

    /// Scalar count of the leading (non-participating) partition.
    pub fn m_n(&self) -> usize {
        self.m_n
    }

    /// Scalar count of the trailing (participating) partition.
    pub fn m_p(&self) -> usize {
        self.m_p
    }

    pub fn dim(&self) -> usize {
        self.scalar_new_to_old.len()
    }

    pub fn scalar_new_to_old(&self) -> &[usize] {
        &self.scalar_new_to_old
    }

    pub fn scalar_old_to_new(&self) -> &[usize] {
        &self.scalar_old_to_new
    }

    /// Position of an original dof inside the trailing partition, if it is
    /// participating.
    pub fn reduced_index_of(&self, old_dof: usize) -> Option<usize> {
        let new = self.scalar_old_to_new[old_dof];
        if new >= self.m_n {
            Some(new - self.m_n)
        } else {
            None
        }
    }

    /// Permute a vector from original into partitioned order.
    pub fn permute_vec(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        assert_eq!(x.len(), self.dim());
        nalgebra::DVector::from_fn(x.len(), |i, _| x[self.scalar_new_to_old[i]])
    }

    /// Permute a vector from partitioned back into original order.
    pub fn unpermute_vec(&self, x: &nalgebra::DVector<f64>) -> nalgebra::DVector<f64> {
        assert_eq!(x.len(), self.dim());
        let mut out = nalgebra::DVector::zeros(x.len());
        for (new, &old) in self.scalar_new_to_old.iter().enumerate() {
            out[old] = x[new];
        }
        out
    }
}

/// Minimum-degree ordering constrained to eliminate non-participating blocks
/// first. Ties break toward the lowest block index, which keeps the result
/// deterministic.
pub fn order_within_partitions(
    adjacency: &[BTreeSet<usize>],
    participating: &[bool],
    sizes: &[usize],
) -> PartitionPermutation {
    assert_eq!(adjacency.len(), participating.len());
    let n = adjacency.len();
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut alive = vec![true; n];
    let mut order = Vec::with_capacity(n);

    let eliminate_phase = |adj: &mut Vec<BTreeSet<usize>>,
                               alive: &mut Vec<bool>,
                               order: &mut Vec<usize>,
                               in_phase: &dyn Fn(usize) -> bool| {
        loop {
            let mut best: Option<(usize, usize)> = None; // (degree, node)
            for v in 0..n {
                if alive[v] && in_phase(v) {
                    let deg = adj[v].len();
                    if best.map_or(true, |(bd, bv)| deg < bd || (deg == bd && v < bv)) {
                        best = Some((deg, v));
                    }
                }
            }
            let Some((_, v)) = best else { break };
            // connect the remaining neighbors of v into a clique
            let neighbors: Vec<usize> = adj[v].iter().copied().collect();
            for (ai, &a) in neighbors.iter().enumerate() {
                for &b in &neighbors[ai + 1..] {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            for &a in &neighbors {
                adj[a].remove(&v);
            }
            adj[v].clear();
            alive[v] = false;
            order.push(v);
        }
    };

    eliminate_phase(&mut adj, &mut alive, &mut order, &|v| !participating[v]);
    let n_lead = order.len();
    eliminate_phase(&mut adj, &mut alive, &mut order, &|v| participating[v]);
    debug_assert_eq!(order.len(), n);
    PartitionPermutation::new(sizes, order, n_lead)
}

/// Number of block fill entries the Cholesky factor acquires beyond the input
/// pattern when eliminating in the given order.
pub fn elimination_fill(adjacency: &[BTreeSet<usize>], new_to_old: &[usize]) -> usize {
    let n = adjacency.len();
    assert_eq!(new_to_old.len(), n);
    let mut adj: Vec<BTreeSet<usize>> = adjacency.to_vec();
    let mut fill = 0;
    for &v in new_to_old {
        let neighbors: Vec<usize> = adj[v].iter().copied().collect();
        for (ai, &a) in neighbors.iter().enumerate() {
            for &b in &neighbors[ai + 1..] {
                if adj[a].insert(b) {
                    adj[b].insert(a);
                    fill += 1;
                }
            }
        }
        for &a in &neighbors {
            adj[a].remove(&v);
        }
        adj[v].clear();
    }
    fill
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn chain_adjacency(n: usize) -> Vec<BTreeSet<usize>> {
        let mut adj = vec![BTreeSet::new(); n];
        for i in 0..n - 1 {
            adj[i].insert(i + 1);
            adj[i + 1].insert(i);
        }
        adj
    }

    #[test]
    fn chain_orders_without_fill() {
        let n = 12;
        let adj = chain_adjacency(n);
        let sizes = vec![3; n];
        let perm = order_within_partitions(&adj, &vec![false; n], &sizes);
        assert_eq!(perm.m_p(), 0);
        assert_eq!(elimination_fill(&adj, perm.block_new_to_old()), 0);
    }

    #[test]
    fn partition_boundary_is_respected() {
        let n = 10;
        let adj = chain_adjacency(n);
        let mut part = vec![false; n];
        part[3] = true;
        part[7] = true;
        let sizes = vec![3; n];
        let perm = order_within_partitions(&adj, &part, &sizes);
        let order = perm.block_new_to_old();
        let lead = perm.n_blocks_leading();
        assert_eq!(lead, 8);
        for &b in &order[..lead] {
            assert!(!part[b]);
        }
        for &b in &order[lead..] {
            assert!(part[b]);
        }
        assert_eq!(perm.m_n(), 24);
        assert_eq!(perm.m_p(), 6);
    }

    #[test]
    fn scalar_permutation_is_bijective_and_trailing() {
        let n = 6;
        let adj = chain_adjacency(n);
        let part = vec![false, true, false, false, true, false];
        let sizes = vec![3, 1, 3, 3, 1, 3];
        let perm = order_within_partitions(&adj, &part, &sizes);
        let mut seen = vec![false; perm.dim()];
        for &o in perm.scalar_new_to_old() {
            assert!(!seen[o]);
            seen[o] = true;
        }
        assert!(seen.iter().all(|&s| s));
        // participating dofs are exactly the trailing m_p slots
        assert_eq!(perm.m_p(), 2);
        assert_eq!(perm.reduced_index_of(3), Some(0)); // block 1 scalar dof
        assert_eq!(perm.reduced_index_of(0), None);
        // round trip
        let x = nalgebra::DVector::from_fn(perm.dim(), |i, _| i as f64);
        let y = perm.unpermute_vec(&perm.permute_vec(&x));
        assert_eq!(x, y);
    }

    #[test]
    fn beats_identity_on_random_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trials = 50;
        let mut no_worse = 0;
        for _ in 0..trials {
            let n = rng.gen_range(8..40);
            let mut adj = vec![BTreeSet::new(); n];
            // random sparse graph plus a spanning chain for connectivity
            for i in 0..n - 1 {
                adj[i].insert(i + 1);
                adj[i + 1].insert(i);
            }
            let extra = rng.gen_range(n..3 * n);
            for _ in 0..extra {
                let a = rng.gen_range(0..n);
                let b = rng.gen_range(0..n);
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
            let part: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            let sizes = vec![3; n];
            let perm = order_within_partitions(&adj, &part, &sizes);
            let ordered_fill = elimination_fill(&adj, perm.block_new_to_old());
            let stable = PartitionPermutation::stable(&sizes, &part);
            let identity_fill = elimination_fill(&adj, stable.block_new_to_old());
            if ordered_fill <= identity_fill {
                no_worse += 1;
            }
        }
        assert!(
            no_worse * 10 >= trials * 9,
            "ordering beat identity on only {no_worse}/{trials} trials"
        );
    }
}
