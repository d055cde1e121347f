//! Small dense linear-algebra kernels written against [`Real`].
//!
//! nalgebra's decompositions require `RealField`, which the tape scalar does
//! not implement, so the handful of factorizations the core needs live here.

use crate::real::Real;
use nalgebra::{DMatrix, DVector, Dim, Matrix, Matrix3, RawStorage, SMatrix};

/// Frobenius norm of any matrix or vector.
pub fn norm<T: Real, R: Dim, C: Dim, S: RawStorage<T, R, C>>(m: &Matrix<T, R, C, S>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Squared Frobenius norm.
pub fn norm_squared<T: Real, R: Dim, C: Dim, S: RawStorage<T, R, C>>(m: &Matrix<T, R, C, S>) -> T {
    m.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns `None` when a pivot falls below `min_pivot`.
pub fn cholesky<T: Real, const N: usize>(
    a: &SMatrix<T, N, N>,
    min_pivot: T,
) -> Option<SMatrix<T, N, N>> {
    let mut l = SMatrix::<T, N, N>::zeros();
    for j in 0..N {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > min_pivot) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..N {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Inverse of an SPD matrix through its Cholesky factor.
pub fn spd_inverse<T: Real, const N: usize>(
    a: &SMatrix<T, N, N>,
    min_pivot: T,
) -> Option<SMatrix<T, N, N>> {
    let l = cholesky(a, min_pivot)?;
    // Invert L by forward substitution, then A^{-1} = L^{-T} L^{-1}.
    let mut linv = SMatrix::<T, N, N>::zeros();
    for j in 0..N {
        linv[(j, j)] = T::one() / l[(j, j)];
        for i in (j + 1)..N {
            let mut s = T::zero();
            for k in j..i {
                s -= l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = s / l[(i, i)];
        }
    }
    Some(linv.transpose() * linv)
}

/// Inverse of a dynamically sized SPD matrix.
pub fn spd_inverse_dyn<T: Real>(a: &DMatrix<T>, min_pivot: T) -> Option<DMatrix<T>> {
    let n = a.nrows();
    let mut l = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > min_pivot) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    let mut linv = DMatrix::<T>::zeros(n, n);
    for j in 0..n {
        linv[(j, j)] = T::one() / l[(j, j)];
        for i in (j + 1)..n {
            let mut s = T::zero();
            for k in j..i {
                s -= l[(i, k)] * linv[(k, j)];
            }
            linv[(i, j)] = s / l[(i, i)];
        }
    }
    Some(linv.transpose() * linv)
}

/// Determinant of a 3x3 matrix.
pub fn det3<T: Real>(m: &Matrix3<T>) -> T {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

/// Inverse of a 3x3 matrix by cofactors.
pub fn inverse3<T: Real>(m: &Matrix3<T>) -> Option<Matrix3<T>> {
    let det = det3(m);
    if det == T::zero() || !det.is_finite() {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)];
    let adj = Matrix3::new(
        c(1, 1, 2, 2),
        -c(0, 1, 2, 2),
        c(0, 1, 1, 2),
        -c(1, 0, 2, 2),
        c(0, 0, 2, 2),
        -c(0, 0, 1, 2),
        c(1, 0, 2, 1),
        -c(0, 0, 2, 1),
        c(0, 0, 1, 1),
    );
    Some(adj / det)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
///
/// Returns `None` when a pivot is exactly zero or non-finite.
pub fn solve<T: Real>(a: &DMatrix<T>, b: &DVector<T>) -> Option<DVector<T>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    let mut m = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().partial_cmp(&m[(j, col)].abs()).unwrap_or(std::cmp::Ordering::Equal))?;
        if m[(piv, col)] == T::zero() || !m[(piv, col)].is_finite() {
            return None;
        }
        m.swap_rows(col, piv);
        x.swap_rows(col, piv);
        for r in (col + 1)..n {
            let f = m[(r, col)] / m[(col, col)];
            for c in col..n {
                let v = m[(col, c)];
                m[(r, c)] -= f * v;
            }
            let v = x[col];
            x[r] -= f * v;
        }
    }
    for r in (0..n).rev() {
        let mut s = x[r];
        for c in (r + 1)..n {
            s -= m[(r, c)] * x[c];
        }
        x[r] = s / m[(r, r)];
    }
    Some(x)
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations.
///
/// `a` is a row-major `n x n` buffer; only its symmetric part is used.
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of a row-major `n x n` buffer.
pub fn jacobi_eigen<T: Real>(a: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    assert_eq!(a.len(), n * n);
    let mut m: Vec<T> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            (a[i * n + j] + a[j * n + i]) * T::lit(0.5)
        })
        .collect();
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }
    let total: T = m.iter().fold(T::zero(), |s, &x| s + x * x);
    let tol = T::epsilon() * T::epsilon() * total;
    for _sweep in 0..64 {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if !(off > tol) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == T::zero() {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let sign = if theta >= T::zero() { T::one() } else { -T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i * n + i]
            .partial_cmp(&m[j * n + j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vectors = vec![T::zero(); n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[r * n + col] = v[r * n + src];
        }
    }
    (values, vectors)
}

/// Eigenvalues (ascending) and eigenvectors (columns) of a symmetric matrix.
pub fn sym_eigen<T: Real, const N: usize>(a: &SMatrix<T, N, N>) -> (SMatrix<T, N, 1>, SMatrix<T, N, N>) {
    let flat: Vec<T> = (0..N * N).map(|k| a[(k / N, k % N)]).collect();
    let (vals, vecs) = jacobi_eigen(&flat, N);
    (
        SMatrix::<T, N, 1>::from_fn(|i, _| vals[i]),
        SMatrix::<T, N, N>::from_fn(|i, j| vecs[i * N + j]),
    )
}

/// Eigenvalues (ascending) of a dynamically sized symmetric matrix.
pub fn sym_eigenvalues_dyn<T: Real>(a: &DMatrix<T>) -> Vec<T> {
    let n = a.nrows();
    let flat: Vec<T> = (0..n * n).map(|k| a[(k / n, k % n)]).collect();
    jacobi_eigen(&flat, n).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Matrix6};

    #[test]
    fn jacobi_matches_nalgebra_on_random_spd() {
        let a = Matrix6::<f64>::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4);
        let spd = a * a.transpose() + Matrix6::identity() * 0.1;
        let (vals, vecs) = sym_eigen(&spd);
        let mut reference: Vec<f64> = spd.symmetric_eigen().eigenvalues.iter().copied().collect();
        reference.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for i in 0..6 {
            assert!((vals[i] - reference[i]).abs() < 1e-12 * reference[5]);
        }
        let recon = vecs * Matrix6::from_diagonal(&vals) * vecs.transpose();
        assert!((recon - spd).norm() < 1e-12 * spd.norm());
    }

    #[test]
    fn spd_inverse_round_trip() {
        let a = Matrix4::<f64>::new(4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0);
        let inv = spd_inverse(&a, 1e-12).unwrap();
        assert!((a * inv - Matrix4::identity()).norm() < 1e-13);
        let dyn_inv = spd_inverse_dyn(&DMatrix::from_iterator(4, 4, a.iter().copied()), 1e-12).unwrap();
        assert!((dyn_inv - DMatrix::from_iterator(4, 4, inv.iter().copied())).norm() < 1e-13);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = nalgebra::Matrix2::<f64>::new(1.0, 2.0, 2.0, 1.0);
        assert!(cholesky(&a, 1e-12).is_none());
    }

    #[test]
    fn solve_matches_known_solution() {
        let a = DMatrix::<f64>::from_row_slice(3, 3, &[0.0, 2.0, 1.0, 1.0, 1.0, 0.0, 3.0, 0.0, 1.0]);
        let x = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let sol = solve(&a, &(&a * &x)).unwrap();
        assert!((sol - x).norm() < 1e-14);
        assert!(solve(&DMatrix::<f64>::zeros(2, 2), &DVector::zeros(2)).is_none());
    }

    #[test]
    fn inverse3_cofactors() {
        let m = Matrix3::<f64>::new(2.0, 0.3, -1.0, 0.1, 1.5, 0.4, 0.0, -0.2, 3.0);
        let inv = inverse3(&m).unwrap();
        assert!((m * inv - Matrix3::identity()).norm() < 1e-14);
        assert!((det3(&m) - m.determinant()).abs() < 1e-14);
    }
}
