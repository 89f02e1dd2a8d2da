//! Matrix permanent by Ryser's inclusion-exclusion formula, walking column
//! subsets in Gray-code order so every step updates the row sums with a
//! single column.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest matrix the engine will expand by default.
pub const DEFAULT_PERMANENT_CAP: usize = 12;

pub fn permanent(matrix: &DMatrix<Complex64>) -> Result<Complex64> {
    permanent_with_cap(matrix, DEFAULT_PERMANENT_CAP)
}

pub fn permanent_with_cap(matrix: &DMatrix<Complex64>, cap: usize) -> Result<Complex64> {
    let n = matrix.nrows();
    if matrix.ncols() != n {
        return Err(Error::Dimension(format!(
            "permanent needs a square matrix, got {}x{}",
            n,
            matrix.ncols()
        )));
    }
    if n > cap {
        return Err(Error::PermanentSize { size: n, cap });
    }
    if n == 0 {
        return Ok(Complex64::new(1.0, 0.0));
    }

    let mut row_sums = vec![Complex64::new(0.0, 0.0); n];
    let mut in_subset = vec![false; n];
    let mut total = Complex64::new(0.0, 0.0);
    let mut subset_size = 0usize;
    for k in 1u64..(1u64 << n) {
        let col = k.trailing_zeros() as usize;
        if in_subset[col] {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s -= matrix[(i, col)];
            }
            subset_size -= 1;
        } else {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s += matrix[(i, col)];
            }
            subset_size += 1;
        }
        in_subset[col] = !in_subset[col];

        let product = row_sums.iter().fold(Complex64::new(1.0, 0.0), |acc, &s| acc * s);
        if subset_size.is_multiple_of(2) {
            total += product;
        } else {
            total -= product;
        }
    }
    if n % 2 == 1 {
        total = -total;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct sum over all permutations (Heap's algorithm).
    fn naive(m: &DMatrix<Complex64>) -> Complex64 {
        let n = m.nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut c = vec![0usize; n];
        let term = |p: &[usize]| {
            p.iter()
                .enumerate()
                .fold(Complex64::new(1.0, 0.0), |acc, (i, &j)| acc * m[(i, j)])
        };
        let mut total = term(&perm);
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                total += term(&perm);
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        total
    }

    #[test]
    fn identity_and_ones() {
        let id = DMatrix::<Complex64>::identity(3, 3);
        assert!((permanent(&id).unwrap() - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        let mut fact = 1.0;
        for n in 1..=8 {
            fact *= n as f64;
            let ones = DMatrix::from_element(n, n, Complex64::new(1.0, 0.0));
            let p = permanent(&ones).unwrap();
            assert!((p.re - fact).abs() <= 1e-12 * fact, "n={n}: {p}");
            assert!(p.im.abs() < 1e-9);
        }
    }

    #[test]
    fn random_matrices_match_permutation_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 1..=6 {
            for _ in 0..10 {
                let m = DMatrix::from_fn(n, n, |_, _| {
                    Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
                });
                let expected = naive(&m);
                let got = permanent(&m).unwrap();
                assert!(
                    (got - expected).norm() <= 1e-12 * expected.norm().max(1.0),
                    "n={n}: {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn cap_and_shape_errors() {
        let m = DMatrix::from_element(13, 13, Complex64::new(1.0, 0.0));
        assert!(matches!(permanent(&m), Err(Error::PermanentSize { size: 13, cap: 12 })));
        let m = DMatrix::from_element(2, 3, Complex64::new(1.0, 0.0));
        assert!(matches!(permanent(&m), Err(Error::Dimension(_))));
        assert_eq!(
            permanent(&DMatrix::<Complex64>::zeros(0, 0)).unwrap(),
            Complex64::new(1.0, 0.0)
        );
    }

    #[test]
    fn duplicated_row_and_column() {
        // perm of [[a, a], [a, a]] = 2a^2; duplicating a detector doubles the pair term.
        let a = Complex64::new(1.5, 0.0);
        let m = DMatrix::from_element(2, 2, a);
        assert!((permanent(&m).unwrap() - 2.0 * a * a).norm() < 1e-14);
    }
}
