//! SO(3)/SE(3) primitives: hat/vee, exponential and logarithm maps, polar
//! reprojection onto SO(3), and the stacked-row generalized coordinate.

use crate::linalg::{det3, inverse3, norm, norm_squared, sym_eigen};
use crate::real::Real;
use nalgebra::{Matrix3, SVector, Vector3};
use std::ops::Deref;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("matrix is not skew-symmetric (|S + S^T|_F = {asymmetry:e})")]
    NonSkewInput { asymmetry: f64 },
    #[error("matrix is degenerate or reflecting (det = {det:e})")]
    DegenerateMatrix { det: f64 },
    #[error("matrix is not a rotation (|R^T R - I|_F = {orthogonality:e}, det = {det})")]
    NotARotation { orthogonality: f64, det: f64 },
}

/// Tolerance used when validating rotation matrices: 1e-9 in double
/// precision, looser for `f32`.
pub fn rotation_tolerance<T: Real>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(1e3))
}

/// Skew-symmetric matrix with `hat(v) * w == v.cross(w)`.
#[rustfmt::skip]
pub fn hat<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(
        z,    -v.z,  v.y,
        v.z,   z,   -v.x,
        -v.y,  v.x,  z,
    )
}

/// Inverse of [`hat`]. Rejects inputs with `|S + S^T|_F > 1e-8`.
pub fn vee<T: Real>(s: &Matrix3<T>) -> Result<Vector3<T>, GeometryError> {
    let asym = norm(&(s + s.transpose()));
    if !(asym <= T::lit(1e-8)) {
        return Err(GeometryError::NonSkewInput {
            asymmetry: asym.value(),
        });
    }
    Ok(vee_unchecked(s))
}

/// Reads the three independent entries of a skew matrix without checking.
pub fn vee_unchecked<T: Real>(s: &Matrix3<T>) -> Vector3<T> {
    Vector3::new(s[(2, 1)], s[(0, 2)], s[(1, 0)])
}

/// `vee` of the skew part, `((S - S^T) / 2)^v`.
pub fn vee_skew_part<T: Real>(s: &Matrix3<T>) -> Vector3<T> {
    let h = T::lit(0.5);
    Vector3::new(
        (s[(2, 1)] - s[(1, 2)]) * h,
        (s[(0, 2)] - s[(2, 0)]) * h,
        (s[(1, 0)] - s[(0, 1)]) * h,
    )
}

/// A 3x3 orthonormal matrix with unit determinant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix<T: Real>(Matrix3<T>);

impl<T: Real> RotationMatrix<T> {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validates `m` against the rotation invariants.
    pub fn from_matrix(m: Matrix3<T>) -> Result<Self, GeometryError> {
        let orth = norm(&(m.transpose() * m - Matrix3::identity()));
        let det = det3(&m);
        let tol = rotation_tolerance::<T>();
        if orth <= tol && (det - T::one()).abs() <= tol {
            Ok(RotationMatrix(m))
        } else {
            Err(GeometryError::NotARotation {
                orthogonality: orth.value(),
                det: det.value(),
            })
        }
    }

    /// Wraps `m` without checking; callers guarantee orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        RotationMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix3<T> {
        self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn about_x(angle: T) -> Self {
        so3_exp(&Vector3::new(angle, T::zero(), T::zero()))
    }

    pub fn about_y(angle: T) -> Self {
        so3_exp(&Vector3::new(T::zero(), angle, T::zero()))
    }

    pub fn about_z(angle: T) -> Self {
        so3_exp(&Vector3::new(T::zero(), T::zero(), angle))
    }
}

impl<T: Real> Deref for RotationMatrix<T> {
    type Target = Matrix3<T>;
    fn deref(&self) -> &Matrix3<T> {
        &self.0
    }
}

/// Rodrigues' formula, with series coefficients for small angles.
pub fn so3_exp<T: Real>(w: &Vector3<T>) -> RotationMatrix<T> {
    let theta2 = norm_squared(w);
    let (a, b) = if theta2 < T::lit(1e-8) {
        (
            T::one() - theta2 / T::lit(6.0) + theta2 * theta2 / T::lit(120.0),
            T::lit(0.5) - theta2 / T::lit(24.0) + theta2 * theta2 / T::lit(720.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    let k = hat(w);
    RotationMatrix(Matrix3::identity() + k * a + k * k * b)
}

/// Logarithm map `SO(3) -> R^3`; the result has norm at most pi.
///
/// Near the identity the first-order series is used. Near a half-turn the
/// axis is taken from the column of `(R + R^T)/2 - cos(theta) I` with the
/// largest diagonal entry. At exactly pi the sign is chosen so the axis
/// component of largest magnitude is positive.
pub fn so3_log<T: Real>(r: &RotationMatrix<T>) -> Vector3<T> {
    let m = r.matrix();
    let half = T::lit(0.5);
    let cos_theta = ((m.trace() - T::one()) * half).max(-T::one()).min(T::one());
    let s = vee_skew_part(m);
    let s2 = norm_squared(&s);
    if cos_theta > T::lit(-0.9) {
        if s2 < T::lit(1e-8) {
            // theta / sin(theta) = 1 + theta^2/6 + 7 theta^4/360 + ...
            let factor = T::one() + s2 / T::lit(6.0) + s2 * s2 * T::lit(7.0 / 360.0);
            return s * factor;
        }
        let sin_theta = s2.sqrt();
        let theta = sin_theta.atan2(cos_theta);
        return s * (theta / sin_theta);
    }
    let sym = (m + m.transpose()) * half - Matrix3::identity() * cos_theta;
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].partial_cmp(&sym[(j, j)]).unwrap())
        .unwrap();
    let col: Vector3<T> = sym.column(k).into_owned();
    let mut axis = col / norm(&col);
    let sin_theta = s2.sqrt();
    if sin_theta > T::lit(1e-12) {
        if axis.dot(&s) < T::zero() {
            axis = -axis;
        }
    } else {
        let big = (0..3)
            .max_by(|&i, &j| axis[i].abs().partial_cmp(&axis[j].abs()).unwrap())
            .unwrap();
        if axis[big] < T::zero() {
            axis = -axis;
        }
    }
    let theta = sin_theta.atan2(cos_theta);
    axis * theta
}

fn check_det<T: Real>(m: &Matrix3<T>) -> Result<(), GeometryError> {
    let det = det3(m);
    if det > T::lit(1e-6) {
        Ok(())
    } else {
        Err(GeometryError::DegenerateMatrix { det: det.value() })
    }
}

/// Nearest rotation in Frobenius norm, `M (M^T M)^{-1/2}`, with the inverse
/// square root taken from a symmetric eigen-decomposition.
pub fn reproject<T: Real>(m: &Matrix3<T>) -> Result<RotationMatrix<T>, GeometryError> {
    check_det(m)?;
    let (vals, vecs) = sym_eigen(&(m.transpose() * m));
    let inv_sqrt = Matrix3::from_diagonal(&vals.map(|l| T::one() / l.sqrt()));
    Ok(RotationMatrix(m * (vecs * inv_sqrt * vecs.transpose())))
}

/// Same polar factor as [`reproject`], computed by the Newton iteration
/// `X <- (X + X^{-T}) / 2`. Smooth in its input, so it is the variant used on
/// differentiated paths.
pub fn reproject_newton<T: Real>(m: &Matrix3<T>) -> Result<RotationMatrix<T>, GeometryError> {
    check_det(m)?;
    let mut x = *m;
    for _ in 0..50 {
        let inv_t = inverse3(&x)
            .ok_or(GeometryError::DegenerateMatrix { det: 0.0 })?
            .transpose();
        let next = (x + inv_t) * T::lit(0.5);
        let delta = norm(&(next - x));
        x = next;
        if delta <= T::epsilon() * T::lit(4.0) {
            break;
        }
    }
    Ok(RotationMatrix(x))
}

/// Which polar-factor algorithm the integrators apply after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reprojection {
    #[default]
    Eigen,
    Newton,
}

impl Reprojection {
    pub fn apply<T: Real>(self, m: &Matrix3<T>) -> Result<RotationMatrix<T>, GeometryError> {
        match self {
            Reprojection::Eigen => reproject(m),
            Reprojection::Newton => reproject_newton(m),
        }
    }
}

/// Generalized coordinate `q = [p; r1; r2; r3]` where `r_i` are the ROWS of R.
///
/// All conversions between `q` and `(p, R)` go through [`from_pose`],
/// [`position`] and [`rotation`].
///
/// [`from_pose`]: GeneralizedCoord::from_pose
/// [`position`]: GeneralizedCoord::position
/// [`rotation`]: GeneralizedCoord::rotation
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralizedCoord<T: Real>(SVector<T, 12>);

impl<T: Real> GeneralizedCoord<T> {
    pub fn from_pose(p: &Vector3<T>, r: &Matrix3<T>) -> Self {
        let mut q = SVector::<T, 12>::zeros();
        q.fixed_rows_mut::<3>(0).copy_from(p);
        for i in 0..3 {
            for j in 0..3 {
                q[3 + 3 * i + j] = r[(i, j)];
            }
        }
        GeneralizedCoord(q)
    }

    pub fn identity() -> Self {
        Self::from_pose(&Vector3::zeros(), &Matrix3::identity())
    }

    pub fn from_vector(q: SVector<T, 12>) -> Self {
        GeneralizedCoord(q)
    }

    pub fn as_vector(&self) -> &SVector<T, 12> {
        &self.0
    }

    pub fn position(&self) -> Vector3<T> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Matrix3<T> {
        Matrix3::from_fn(|i, j| self.0[3 + 3 * i + j])
    }

    /// Row `i` of R as a column vector.
    pub fn row(&self, i: usize) -> Vector3<T> {
        self.0.fixed_rows::<3>(3 + 3 * i).into_owned()
    }

    /// Copy of `self` with the rotation block replaced by its polar factor.
    pub fn reprojected(&self, method: Reprojection) -> Result<Self, GeometryError> {
        let r = method.apply(&self.rotation())?;
        Ok(Self::from_pose(&self.position(), r.matrix()))
    }
}
