//! Small dense complex linear algebra.
//!
//! The digital precoders only ever solve K x K systems (K <= N_RF), so a
//! partial-pivot LU is all that is needed.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use num_complex::Complex64;

/// Conjugate transpose.
pub fn hermitian(a: &Array2<Complex64>) -> Array2<Complex64> {
    a.t().mapv(|z| z.conj())
}

/// Solve A X = B for square A via LU with partial pivoting.
pub fn solve(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::DimMismatch(format!(
            "solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let m = b.ncols();
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let mut pivot = col;
        let mut best = lu[[col, col]].norm();
        for r in col + 1..n {
            let v = lu[[r, col]].norm();
            if v > best {
                best = v;
                pivot = r;
            }
        }
        if best == 0.0 {
            return Err(Error::DegenerateChannel("singular matrix in solve".into()));
        }
        if pivot != col {
            for c in 0..n {
                lu.swap([col, c], [pivot, c]);
            }
            for c in 0..m {
                x.swap([col, c], [pivot, c]);
            }
        }
        let d = lu[[col, col]];
        for r in col + 1..n {
            let f = lu[[r, col]] / d;
            lu[[r, col]] = f;
            for c in col + 1..n {
                let v = lu[[col, c]];
                lu[[r, c]] -= f * v;
            }
            for c in 0..m {
                let v = x[[col, c]];
                x[[r, c]] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let d = lu[[col, col]];
        for c in 0..m {
            x[[col, c]] /= d;
        }
        for r in 0..col {
            let f = lu[[r, col]];
            for c in 0..m {
                let v = x[[col, c]];
                x[[r, c]] -= f * v;
            }
        }
    }
    Ok(x)
}

pub fn inverse(a: &Array2<Complex64>) -> Result<Array2<Complex64>> {
    solve(a, &Array2::eye(a.nrows()))
}

/// Maximum absolute column sum.
pub fn one_norm(a: &Array2<Complex64>) -> f64 {
    (0..a.ncols())
        .map(|c| a.column(c).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number, computed from an explicit inverse.
pub fn cond_1(a: &Array2<Complex64>) -> Result<f64> {
    let inv = inverse(a)?;
    Ok(one_norm(a) * one_norm(&inv))
}

/// Frobenius norm.
pub fn fro_norm(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// y = A x for complex matrix and vector.
pub fn matvec(a: &Array2<Complex64>, x: &Array1<Complex64>) -> Array1<Complex64> {
    a.dot(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_cn, stream};

    fn random_matrix(n: usize, m: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = stream(seed, 1);
        Array2::from_shape_fn((n, m), |_| sample_cn(&mut rng, 1.0))
    }

    #[test]
    fn solve_recovers_known_solution() {
        let a = random_matrix(5, 5, 11);
        let x_true = random_matrix(5, 3, 12);
        let b = a.dot(&x_true);
        let x = solve(&a, &b).unwrap();
        let err = (&x - &x_true).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "max err {err}");
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = random_matrix(4, 4, 13);
        let inv = inverse(&a).unwrap();
        let eye = a.dot(&inv);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((eye[[i, j]] - Complex64::new(want, 0.0)).norm() < 1e-11);
            }
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = random_matrix(3, 3, 14);
        let row0: Vec<Complex64> = a.row(0).to_vec();
        for (j, v) in row0.iter().enumerate() {
            a[[1, j]] = *v;
        }
        let b = Array2::eye(3);
        assert!(solve(&a, &b).is_err() || cond_1(&a).unwrap() > 1e12);
    }

    #[test]
    fn hermitian_conjugates_and_transposes() {
        let a = random_matrix(2, 3, 15);
        let ah = hermitian(&a);
        assert_eq!(ah.dim(), (3, 2));
        assert_eq!(ah[[2, 1]], a[[1, 2]].conj());
    }
}
