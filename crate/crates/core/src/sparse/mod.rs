//! Block-sparse symmetric matrices and the direct solver built on them.
//!
//! Matrices are stored as dense blocks on a block-sparse lower triangle;
//! vertex blocks are 3x3 and scalar joint coordinates get 1x1 blocks. The
//! factorization in [`cholesky`] eliminates a leading partition first and
//! records the Schur complement onto the trailing partition as a byproduct,
//! which is what the contact stage consumes.

mod cholesky;
mod matrix;
mod matrix_market;
mod ordering;

pub use cholesky::{factorize_with_schur, factorize_with_schur_jitter, CholeskyWithSchur};
pub use matrix::BlockSparseSym;
pub use matrix_market::{write_dense_sym_market, write_factor_market, write_sym_market};
pub use ordering::{elimination_fill, order_within_partitions, PartitionPermutation};
