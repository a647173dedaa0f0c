//! Matrix-market coordinate dumps for offline inspection of patterns,
//! factors, and condensed matrices.

use super::matrix::BlockSparseSym;
use nalgebra::DMatrix;
use std::io::{self, Write};

/// Symmetric matrix dump (lower-triangle coordinates, 1-based).
pub fn write_sym_market(w: &mut impl Write, a: &BlockSparseSym, comment: &str) -> io::Result<()> {
    let entries = a.scalar_entries();
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    writeln!(w, "% {comment}")?;
    writeln!(w, "{} {} {}", a.dim(), a.dim(), entries.len())?;
    for (r, c, v) in entries {
        writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
    }
    Ok(())
}

/// Lower-triangular factor dump (general coordinates, 1-based).
pub fn write_factor_market(
    w: &mut impl Write,
    l: &BlockSparseSym,
    comment: &str,
) -> io::Result<()> {
    let entries = l.scalar_entries();
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "% {comment}")?;
    writeln!(w, "{} {} {}", l.dim(), l.dim(), entries.len())?;
    for (r, c, v) in entries {
        writeln!(w, "{} {} {}", r + 1, c + 1, v)?;
    }
    Ok(())
}

/// Dense symmetric matrix dump (lower triangle, 1-based).
pub fn write_dense_sym_market(
    w: &mut impl Write,
    a: &DMatrix<f64>,
    comment: &str,
) -> io::Result<()> {
    assert_eq!(a.nrows(), a.ncols());
    let n = a.nrows();
    let count = n * (n + 1) / 2;
    writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
    writeln!(w, "% {comment}")?;
    writeln!(w, "{} {} {}", n, n, count)?;
    for c in 0..n {
        for r in c..n {
            writeln!(w, "{} {} {}", r + 1, c + 1, a[(r, c)])?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_one_based_indices() {
        let mut a = BlockSparseSym::zeros(vec![1, 1]);
        a.add_block(0, 0, &nalgebra::dmatrix![4.0]);
        a.add_block(1, 0, &nalgebra::dmatrix![2.0]);
        a.add_block(1, 1, &nalgebra::dmatrix![3.0]);
        let mut buf = Vec::new();
        write_sym_market(&mut buf, &a, "test").unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "%%MatrixMarket matrix coordinate real symmetric"
        );
        assert_eq!(lines.next().unwrap(), "% test");
        assert_eq!(lines.next().unwrap(), "2 2 3");
        let rest: Vec<&str> = lines.collect();
        assert!(rest.contains(&"1 1 4"));
        assert!(rest.contains(&"2 1 2"));
        assert!(rest.contains(&"2 2 3"));
    }
}
