//! Port-Hamiltonian rigid-body dynamics in momentum coordinates and the
//! fixed-step RK4 integrator.
//!
//! The kinematic map `q^x` is stored as a 12x6 matrix with blocks
//! `[[R, 0], [0, hat(r1)], [0, hat(r2)], [0, hat(r3)]]`, so that
//! `q_dot = q^x zeta` gives `p_dot = R v` (world-frame velocity) and
//! `r_i_dot = r_i x omega` (equivalently `R_dot = R hat(omega)`). Its transpose
//! is the 6x12 block `[[R^T, 0], [0, hat(r_i)^T ...]]`.

use crate::geometry::{hat, GeneralizedCoord, GeometryError, Reprojection};
use crate::linalg::{cholesky, norm, spd_inverse};
use crate::real::Real;
use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector, Vector3, Vector6};
use thiserror::Error;

pub type GeneralizedMomentum<T> = Vector6<T>;
pub type Wrench<T> = Vector6<T>;
pub type CoordRate<T> = SVector<T, 12>;

/// Smallest Cholesky pivot accepted for `M(q)`.
pub const MIN_MASS_PIVOT: f64 = 1e-12;
/// Step used for finite differences of coordinate-dependent mass matrices.
pub const MASS_FD_STEP: f64 = 1e-6;
/// Largest step accepted by [`integrate_step`].
pub const MAX_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("mass matrix is not positive definite")]
    SingularMass,
    #[error("state became non-finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("time step {dt} outside (0, {MAX_STEP}]")]
    InvalidStep { dt: f64 },
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// A vehicle in port-Hamiltonian form.
pub trait HamiltonianModel<T: Real> {
    /// Generalized mass matrix `M(q)`.
    fn mass_matrix(&self, q: &GeneralizedCoord<T>) -> Matrix6<T>;
    /// Potential energy `V(q)`.
    fn potential(&self, q: &GeneralizedCoord<T>) -> T;
    /// `dV/dq` as a 12-vector.
    fn potential_gradient(&self, q: &GeneralizedCoord<T>) -> SVector<T, 12>;
    /// Input gain `g(q)`, six rows by `input_dim()` columns.
    fn input_gain(&self, q: &GeneralizedCoord<T>) -> DMatrix<T>;
    fn input_dim(&self) -> usize;
    /// True when `M` does not depend on `q`.
    fn is_coordinate_independent(&self) -> bool {
        false
    }
    /// Projects a commanded input onto the admissible set.
    fn constrain_input(&self, _u: &mut ControlInput<T>) {}
    /// Closed-form `M(q)^{-1}` when the model has one; the Cholesky path is
    /// used otherwise.
    fn mass_inverse_hint(&self, _q: &GeneralizedCoord<T>) -> Option<Matrix6<T>> {
        None
    }
}

/// Actuator command, one entry per input-gain column.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInput<T: Real>(pub DVector<T>);

impl<T: Real> ControlInput<T> {
    pub fn zeros(n: usize) -> Self {
        ControlInput(DVector::zeros(n))
    }

    pub fn from_slice(v: &[T]) -> Self {
        ControlInput(DVector::from_column_slice(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianState<T: Real> {
    pub q: GeneralizedCoord<T>,
    pub p: GeneralizedMomentum<T>,
    pub t: T,
}

impl<T: Real> HamiltonianState<T> {
    pub fn new(q: GeneralizedCoord<T>, p: GeneralizedMomentum<T>, t: T) -> Self {
        HamiltonianState { q, p, t }
    }

    /// Builds the state from body velocities `zeta = [v; omega]`.
    pub fn from_velocity<M: HamiltonianModel<T> + ?Sized>(
        q: GeneralizedCoord<T>,
        zeta: &Vector6<T>,
        t: T,
        model: &M,
    ) -> Self {
        HamiltonianState {
            q,
            p: model.mass_matrix(&q) * zeta,
            t,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.as_vector().iter().chain(self.p.iter()).all(|x| x.is_finite()) && self.t.is_finite()
    }
}

/// `q^x`, see the module docs for the block layout.
pub fn coord_cross<T: Real>(q: &GeneralizedCoord<T>) -> SMatrix<T, 12, 6> {
    let mut m = SMatrix::<T, 12, 6>::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&q.rotation());
    for i in 0..3 {
        m.fixed_view_mut::<3, 3>(3 + 3 * i, 3).copy_from(&hat(&q.row(i)));
    }
    m
}

/// `p^x = [[0, hat(p_v)], [hat(p_v), hat(p_w)]]`.
pub fn momentum_cross<T: Real>(p: &GeneralizedMomentum<T>) -> Matrix6<T> {
    let pv: Vector3<T> = p.fixed_rows::<3>(0).into_owned();
    let pw: Vector3<T> = p.fixed_rows::<3>(3).into_owned();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat(&pv));
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&hat(&pv));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&hat(&pw));
    m
}

pub fn mass_inverse<T: Real, M: HamiltonianModel<T> + ?Sized>(
    model: &M,
    q: &GeneralizedCoord<T>,
) -> Result<Matrix6<T>, DynamicsError> {
    if let Some(inv) = model.mass_inverse_hint(q) {
        return Ok(inv);
    }
    spd_inverse(&model.mass_matrix(q), T::lit(MIN_MASS_PIVOT)).ok_or(DynamicsError::SingularMass)
}

/// Checks `M(q)` is SPD without inverting it.
pub fn check_mass<T: Real, M: HamiltonianModel<T> + ?Sized>(
    model: &M,
    q: &GeneralizedCoord<T>,
) -> Result<(), DynamicsError> {
    cholesky(&model.mass_matrix(q), T::lit(MIN_MASS_PIVOT))
        .map(|_| ())
        .ok_or(DynamicsError::SingularMass)
}

/// Generalized velocity `zeta = M^{-1} p`.
pub fn velocity<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    model: &M,
) -> Result<Vector6<T>, DynamicsError> {
    Ok(mass_inverse(model, &x.q)? * x.p)
}

/// `H = p^T M^{-1} p / 2 + V(q)`.
pub fn hamiltonian<T: Real, M: HamiltonianModel<T> + ?Sized>(
    q: &GeneralizedCoord<T>,
    p: &GeneralizedMomentum<T>,
    model: &M,
) -> Result<T, DynamicsError> {
    let minv = mass_inverse(model, q)?;
    Ok((p.transpose() * minv * p)[0] * T::lit(0.5) + model.potential(q))
}

fn kinetic_gradient_q<T: Real, M: HamiltonianModel<T> + ?Sized>(
    q: &GeneralizedCoord<T>,
    p: &GeneralizedMomentum<T>,
    model: &M,
) -> Result<SVector<T, 12>, DynamicsError> {
    let mut grad = SVector::<T, 12>::zeros();
    if model.is_coordinate_independent() {
        return Ok(grad);
    }
    let h = T::lit(MASS_FD_STEP);
    let kinetic = |qv: SVector<T, 12>| -> Result<T, DynamicsError> {
        let minv = mass_inverse(model, &GeneralizedCoord::from_vector(qv))?;
        Ok((p.transpose() * minv * p)[0] * T::lit(0.5))
    };
    for k in 0..12 {
        let mut plus = *q.as_vector();
        let mut minus = *q.as_vector();
        plus[k] += h;
        minus[k] -= h;
        grad[k] = (kinetic(plus)? - kinetic(minus)?) / (h + h);
    }
    Ok(grad)
}

/// `(dH/dq, dH/dp)`.
pub fn hamiltonian_gradients<T: Real, M: HamiltonianModel<T> + ?Sized>(
    q: &GeneralizedCoord<T>,
    p: &GeneralizedMomentum<T>,
    model: &M,
) -> Result<(SVector<T, 12>, Vector6<T>), DynamicsError> {
    let minv = mass_inverse(model, q)?;
    let dq = model.potential_gradient(q) + kinetic_gradient_q(q, p, model)?;
    Ok((dq, minv * p))
}

/// Body wrench produced by the input, `g(q) u`.
pub fn input_wrench<T: Real, M: HamiltonianModel<T> + ?Sized>(
    q: &GeneralizedCoord<T>,
    u: &ControlInput<T>,
    model: &M,
) -> Result<Wrench<T>, DynamicsError> {
    if u.dim() != model.input_dim() {
        return Err(DynamicsError::DimensionMismatch {
            expected: model.input_dim(),
            got: u.dim(),
        });
    }
    let w = model.input_gain(q) * &u.0;
    Ok(Vector6::from_iterator(w.iter().copied()))
}

/// Hamilton's equations: `q_dot = q^x dH/dp`,
/// `p_dot = -q^x^T dH/dq + p^x dH/dp + g u + d`.
pub fn vector_field<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    u: &ControlInput<T>,
    d: &Wrench<T>,
    model: &M,
) -> Result<(CoordRate<T>, Vector6<T>), DynamicsError> {
    let (dh_dq, dh_dp) = hamiltonian_gradients(&x.q, &x.p, model)?;
    let qx = coord_cross(&x.q);
    let q_dot = qx * dh_dp;
    let p_dot = -(qx.transpose() * dh_dq) + momentum_cross(&x.p) * dh_dp + input_wrench(&x.q, u, model)? + d;
    Ok((q_dot, p_dot))
}

/// `zeta_dot = (d/dt M^{-1}) p + M^{-1} p_dot`.
pub fn zeta_dot<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    p_dot: &Vector6<T>,
    model: &M,
) -> Result<Vector6<T>, DynamicsError> {
    let minv = mass_inverse(model, &x.q)?;
    let mut out = minv * p_dot;
    if !model.is_coordinate_independent() {
        let q_dot = coord_cross(&x.q) * (minv * x.p);
        let h = T::lit(MASS_FD_STEP);
        let plus = GeneralizedCoord::from_vector(x.q.as_vector() + q_dot * h);
        let minus = GeneralizedCoord::from_vector(x.q.as_vector() - q_dot * h);
        let dminv = (mass_inverse(model, &plus)? - mass_inverse(model, &minus)?) / (h + h);
        out += dminv * x.p;
    }
    Ok(out)
}

fn offset<T: Real>(x: &HamiltonianState<T>, dq: &CoordRate<T>, dp: &Vector6<T>, s: T, dt: T) -> HamiltonianState<T> {
    HamiltonianState {
        q: GeneralizedCoord::from_vector(x.q.as_vector() + dq * s),
        p: x.p + dp * s,
        t: x.t + dt,
    }
}

/// Checks `dt` lies in `(0, MAX_STEP]`.
pub fn check_step<T: Real>(dt: T) -> Result<(), DynamicsError> {
    if dt > T::zero() && dt <= T::lit(MAX_STEP) {
        Ok(())
    } else {
        Err(DynamicsError::InvalidStep { dt: dt.value() })
    }
}

/// One classical RK4 step with `u` held constant and `d_fn` evaluated at each
/// stage, followed by reprojection of the rotation block.
pub fn integrate_step<T, M, D>(
    x: &HamiltonianState<T>,
    u: &ControlInput<T>,
    d_fn: D,
    model: &M,
    dt: T,
    reprojection: Reprojection,
) -> Result<HamiltonianState<T>, DynamicsError>
where
    T: Real,
    M: HamiltonianModel<T> + ?Sized,
    D: Fn(&HamiltonianState<T>) -> Wrench<T>,
{
    check_step(dt)?;
    let half = dt * T::lit(0.5);
    let (k1q, k1p) = vector_field(x, u, &d_fn(x), model)?;
    let x2 = offset(x, &k1q, &k1p, half, half);
    let (k2q, k2p) = vector_field(&x2, u, &d_fn(&x2), model)?;
    let x3 = offset(x, &k2q, &k2p, half, half);
    let (k3q, k3p) = vector_field(&x3, u, &d_fn(&x3), model)?;
    let x4 = offset(x, &k3q, &k3p, dt, dt);
    let (k4q, k4p) = vector_field(&x4, u, &d_fn(&x4), model)?;
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    let dq = (k1q + k2q * two + k3q * two + k4q) * sixth;
    let dp = (k1p + k2p * two + k3p * two + k4p) * sixth;
    let raw = HamiltonianState {
        q: GeneralizedCoord::from_vector(x.q.as_vector() + dq),
        p: x.p + dp,
        t: x.t + dt,
    };
    if !raw.is_finite() {
        return Err(DynamicsError::NonFiniteState { t: raw.t.value() });
    }
    Ok(HamiltonianState {
        q: raw.q.reprojected(reprojection)?,
        ..raw
    })
}

/// Orthonormality defect `|R^T R - I|_F` of the rotation block.
pub fn rotation_defect<T: Real>(q: &GeneralizedCoord<T>) -> T {
    let r = q.rotation();
    norm(&(r.transpose() * r - nalgebra::Matrix3::identity()))
}
