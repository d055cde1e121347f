//! Energy-shaping tracking controller with damping injection and disturbance
//! compensation.

use crate::disturbance::{apply, DisturbanceError, DisturbanceFeatures};
use crate::dynamics::{coord_cross, mass_inverse, momentum_cross, ControlInput, DynamicsError, HamiltonianModel, HamiltonianState, Wrench};
use crate::geometry::{hat, so3_exp, vee_skew_part, GeneralizedCoord};
use crate::linalg::{norm, spd_inverse_dyn, sym_eigenvalues_dyn};
use crate::real::Real;
use crate::trajectory::ReferencePoint;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest singular value of `g(q)` accepted by the pseudo-inverse.
pub const MIN_GAIN_SINGULAR_VALUE: f64 = 1e-8;
/// Step of the finite-difference desired-momentum rate.
pub const MOMENTUM_RATE_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControllerError {
    #[error("input gain is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficientGain { sigma_min: f64 },
    #[error("invalid controller gains: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub kp: f64,
    pub kr: f64,
    pub kv: f64,
    pub kw: f64,
}

impl ControllerGains {
    pub fn new(kp: f64, kr: f64, kv: f64, kw: f64) -> Result<Self, ControllerError> {
        let g = ControllerGains { kp, kr, kv, kw };
        g.validate()?;
        Ok(g)
    }

    /// Gains of the quadrotor experiments.
    pub fn quadrotor() -> Self {
        ControllerGains {
            kp: 0.135,
            kr: 1.0,
            kv: 0.0675,
            kw: 0.08,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        for (name, v) in [("kp", self.kp), ("kR", self.kr), ("kv", self.kv), ("kw", self.kw)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ControllerError::InvalidGains(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `K_d = diag(kv I, kw I)`.
    pub fn damping<T: Real>(&self) -> Matrix6<T> {
        let (kv, kw) = (T::lit(self.kv), T::lit(self.kw));
        Matrix6::from_diagonal(&Vector6::new(kv, kv, kv, kw, kw, kw))
    }

    pub fn scaled(&self, tracking: f64, damping: f64) -> Self {
        ControllerGains {
            kp: self.kp * tracking,
            kr: self.kr * tracking,
            kv: self.kv * damping,
            kw: self.kw * damping,
        }
    }
}

/// How the attitude reference is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttitudeMode {
    /// Use `R*` from the reference trajectory as is.
    #[default]
    Reference,
    /// Replace the body z axis of `R*` by the direction of the desired
    /// translational force, keeping the reference heading. Needed for
    /// under-actuated vehicles, whose lateral force is otherwise discarded by
    /// the pseudo-inverse.
    ThrustAligned,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingErrors<T: Real> {
    pub e_p: Vector3<T>,
    pub e_r: Vector3<T>,
    pub e_v: Vector3<T>,
    pub e_w: Vector3<T>,
    /// `[kp e_p; kR e_R]`.
    pub e: Vector6<T>,
    /// `p - p* = M [e_v; e_w]`.
    pub p_e: Vector6<T>,
    /// `tr(I - R*^T R)`.
    pub attitude_trace: T,
}

impl<T: Real> TrackingErrors<T> {
    pub fn velocity_error(&self) -> Vector6<T> {
        Vector6::new(self.e_v.x, self.e_v.y, self.e_v.z, self.e_w.x, self.e_w.y, self.e_w.z)
    }

    /// `[e_p; e_R]` without gains.
    pub fn unweighted(&self) -> Vector6<T> {
        Vector6::new(self.e_p.x, self.e_p.y, self.e_p.z, self.e_r.x, self.e_r.y, self.e_r.z)
    }

    /// Potential part of the desired Hamiltonian,
    /// `kp |p - p*|^2 / 2 + kR tr(I - R*^T R) / 2`.
    pub fn potential(&self, gains: &ControllerGains) -> T {
        let h = T::lit(0.5);
        h * T::lit(gains.kp) * self.e_p.dot(&self.e_p) + h * T::lit(gains.kr) * self.attitude_trace
    }

    /// `H_d = V_d + (p - p*)^T M^{-1} (p - p*) / 2`.
    pub fn desired_hamiltonian(&self, gains: &ControllerGains) -> T {
        self.potential(gains) + T::lit(0.5) * self.velocity_error().dot(&self.p_e)
    }

    /// `dV_d/dt = e^T M^{-1} p_e`.
    pub fn potential_rate(&self) -> T {
        self.e.dot(&self.velocity_error())
    }
}

fn col3<T: Real>(v: &Vector6<T>, offset: usize) -> Vector3<T> {
    Vector3::new(v[offset], v[offset + 1], v[offset + 2])
}

fn stack<T: Real>(a: &Vector3<T>, b: &Vector3<T>) -> Vector6<T> {
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

pub fn tracking_errors<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    reference: &ReferencePoint<T>,
    gains: &ControllerGains,
    model: &M,
) -> Result<TrackingErrors<T>, ControllerError> {
    let minv = mass_inverse(model, &x.q)?;
    let zeta = minv * x.p;
    let r = x.q.rotation();
    let rs = reference.r;
    let e_p = r.transpose() * (x.q.position() - reference.p);
    let e_r = vee_skew_part(&(rs.transpose() * r));
    let e_v = col3(&zeta, 0) - r.transpose() * reference.v;
    let e_w = col3(&zeta, 3) - r.transpose() * rs * reference.w;
    let mass = model.mass_matrix(&x.q);
    let attitude_trace = T::lit(3.0) - (rs.transpose() * r).trace();
    Ok(TrackingErrors {
        e_p,
        e_r,
        e_v,
        e_w,
        e: stack(&(e_p * T::lit(gains.kp)), &(e_r * T::lit(gains.kr))),
        p_e: mass * stack(&e_v, &e_w),
        attitude_trace,
    })
}

fn body_reference_velocity<T: Real>(r: &Matrix3<T>, reference: &ReferencePoint<T>) -> Vector6<T> {
    stack(&(r.transpose() * reference.v), &(r.transpose() * reference.r * reference.w))
}

/// `p* = M(q) [R^T R* v*; R^T R* w*]` and its time derivative.
///
/// The derivative is analytic for coordinate-independent models and a
/// central difference with step [`MOMENTUM_RATE_STEP`] otherwise.
pub fn desired_momentum<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    reference: &ReferencePoint<T>,
    model: &M,
) -> Result<(Vector6<T>, Vector6<T>), ControllerError> {
    let mass = model.mass_matrix(&x.q);
    let r = x.q.rotation();
    let p_star = mass * body_reference_velocity(&r, reference);
    if !model.is_coordinate_independent() {
        let rate = desired_momentum_rate_fd(x, reference, model, T::lit(MOMENTUM_RATE_STEP))?;
        return Ok((p_star, rate));
    }
    let zeta = mass_inverse(model, &x.q)? * x.p;
    let w_hat = hat(&col3(&zeta, 3));
    let rv = r.transpose() * reference.v;
    let rw = r.transpose() * reference.r * reference.w;
    let lin = -(w_hat * rv) + r.transpose() * reference.a;
    let ang = -(w_hat * rw) + r.transpose() * reference.r * reference.w_dot;
    Ok((p_star, mass * stack(&lin, &ang)))
}

/// Central difference of `p*` with the vehicle and the reference both moved
/// by `+-h` along their current velocities.
pub fn desired_momentum_rate_fd<T: Real, M: HamiltonianModel<T> + ?Sized>(
    x: &HamiltonianState<T>,
    reference: &ReferencePoint<T>,
    model: &M,
    h: T,
) -> Result<Vector6<T>, ControllerError> {
    let zeta = mass_inverse(model, &x.q)? * x.p;
    let v = col3(&zeta, 0);
    let w = col3(&zeta, 3);
    let r = x.q.rotation();
    let p = x.q.position();
    let at = |s: T| -> Vector6<T> {
        let rs = r * so3_exp(&(w * s)).into_inner();
        let q = GeneralizedCoord::from_pose(&(p + r * v * s), &rs);
        let shifted = ReferencePoint {
            t: reference.t + s,
            p: reference.p + reference.v * s,
            v: reference.v + reference.a * s,
            a: reference.a,
            r: reference.r * so3_exp(&(reference.w * s)).into_inner(),
            w: reference.w + reference.w_dot * s,
            w_dot: reference.w_dot,
        };
        model.mass_matrix(&q) * body_reference_velocity(&rs, &shifted)
    };
    Ok((at(h) - at(-h)) / (h + h))
}

/// Left pseudo-inverse `(g^T g)^{-1} g^T`.
pub fn pseudo_inverse<T: Real>(g: &DMatrix<T>) -> Result<DMatrix<T>, ControllerError> {
    let gtg = g.transpose() * g;
    let lambda_min = sym_eigenvalues_dyn(&gtg)[0];
    let sigma_min = lambda_min.max(T::zero()).sqrt();
    if !(sigma_min >= T::lit(MIN_GAIN_SINGULAR_VALUE)) {
        return Err(ControllerError::RankDeficientGain {
            sigma_min: sigma_min.value(),
        });
    }
    let inv = spd_inverse_dyn(&gtg, T::zero()).ok_or(ControllerError::RankDeficientGain {
        sigma_min: sigma_min.value(),
    })?;
    Ok(inv * g.transpose())
}

/// `E(R, R*) = (tr(R^T R*) I - R^T R*) / 2`.
pub fn e_matrix<T: Real>(r: &Matrix3<T>, r_star: &Matrix3<T>) -> Matrix3<T> {
    let m = r.transpose() * r_star;
    (Matrix3::identity() * m.trace() - m) * T::lit(0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput<T: Real> {
    pub u: ControlInput<T>,
    /// Requested body wrench before projection onto the input range.
    pub wrench: Wrench<T>,
    /// `|(I - g g^+) wrench|`.
    pub residual: T,
    pub errors: TrackingErrors<T>,
    /// Reference actually tracked (differs from the input in thrust-aligned mode).
    pub reference: ReferencePoint<T>,
    pub p_star: Vector6<T>,
    pub p_star_dot: Vector6<T>,
}

fn thrust_aligned_attitude<T: Real>(r: &Matrix3<T>, force_body: &Vector3<T>, reference: &Matrix3<T>) -> Option<Matrix3<T>> {
    let f = r * force_body;
    let fn_ = norm(&f);
    if !(fn_ > T::lit(1e-6)) {
        return None;
    }
    let b3 = f / fn_;
    let b1_ref: Vector3<T> = reference.column(0).into_owned();
    let side = b3.cross(&b1_ref);
    let sn = norm(&side);
    if !(sn > T::lit(1e-6)) {
        return None;
    }
    let b2 = side / sn;
    let b1 = b2.cross(&b3);
    Some(Matrix3::from_columns(&[b1, b2, b3]))
}

/// `u = g^+ (q^x^T dV/dq - p^x M^{-1} p - e + p*_dot - K_d M^{-1} p_e - W a_hat)`.
///
/// The damping term is applied as a wrench before the pseudo-inverse, so the
/// closed loop gives `p_e_dot = -e - K_d M^{-1} p_e - W (a_hat - a*)` on the
/// realizable subspace.
#[allow(clippy::too_many_arguments)]
pub fn control<T, M, F>(
    x: &HamiltonianState<T>,
    reference: &ReferencePoint<T>,
    a_hat: &DVector<T>,
    gains: &ControllerGains,
    model: &M,
    features: &F,
    mode: AttitudeMode,
) -> Result<ControlOutput<T>, ControllerError>
where
    T: Real,
    M: HamiltonianModel<T> + ?Sized,
    F: DisturbanceFeatures<T> + ?Sized,
{
    let minv = mass_inverse(model, &x.q)?;
    let zeta = minv * x.p;
    let gravity = coord_cross(&x.q).transpose() * model.potential_gradient(&x.q);
    let coriolis = momentum_cross(&x.p) * zeta;
    let compensation = apply(features, a_hat, &x.q, &x.p)?;
    let kd = gains.damping::<T>();

    let mut effective = *reference;
    if mode == AttitudeMode::ThrustAligned {
        // The translational wrench does not depend on R*.
        let errors = tracking_errors(x, reference, gains, model)?;
        let (_, p_star_dot) = desired_momentum(x, reference, model)?;
        let w = gravity - coriolis - errors.e + p_star_dot - kd * minv * errors.p_e - compensation;
        if let Some(rs) = thrust_aligned_attitude(&x.q.rotation(), &col3(&w, 0), &reference.r) {
            effective.r = rs;
        }
    }

    let errors = tracking_errors(x, &effective, gains, model)?;
    let (p_star, p_star_dot) = desired_momentum(x, &effective, model)?;
    let wrench = gravity - coriolis - errors.e + p_star_dot - kd * minv * errors.p_e - compensation;
    let g = model.input_gain(&x.q);
    let g_pinv = pseudo_inverse(&g)?;
    let wrench_dyn = DVector::from_column_slice(wrench.as_slice());
    let mut u = ControlInput(&g_pinv * &wrench_dyn);
    let residual = norm(&(&wrench_dyn - &g * &u.0));
    model.constrain_input(&mut u);
    Ok(ControlOutput {
        u,
        wrench,
        residual,
        errors,
        reference: effective,
        p_star,
        p_star_dot,
    })
}
