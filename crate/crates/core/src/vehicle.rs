//! Vehicle models: the under-actuated quadrotor with its rotor mixer, and a
//! fully actuated rigid body.

use crate::dynamics::{ControlInput, HamiltonianModel};
use crate::geometry::GeneralizedCoord;
use crate::linalg::solve;
use crate::real::Real;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SVector, Vector2, Vector3, Vector4};
use thiserror::Error;

pub const DEFAULT_MASS: f64 = 0.027;
pub const DEFAULT_INERTIA_DIAG: [f64; 3] = [1.4e-5, 1.4e-5, 2.17e-5];
pub const GRAVITY: f64 = 9.8;
pub const DEFAULT_ARM_LENGTH: f64 = 0.0397;
pub const DEFAULT_TORQUE_COEFF: f64 = 0.005964;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VehicleError {
    #[error("invalid vehicle parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("rotor {rotor} would need negative thrust {force:e} N; clamped input is {clamped:?}")]
    NegativeRotorThrust {
        rotor: usize,
        force: f64,
        clamped: Vec<f64>,
    },
    #[error("rotor allocation matrix is singular")]
    SingularAllocation,
}

fn block_mass<T: Real>(mass: T, inertia: &Matrix3<T>) -> Matrix6<T> {
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * mass));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(inertia);
    m
}

fn gravity_gradient<T: Real>(weight: T) -> SVector<T, 12> {
    let mut g = SVector::zeros();
    g[2] = weight;
    g
}

fn validate_mass<T: Real>(mass: T, inertia: &Matrix3<T>) -> Result<(), VehicleError> {
    if !(mass > T::zero()) || !mass.is_finite() {
        return Err(VehicleError::InvalidParameter {
            name: "mass",
            reason: format!("must be positive, got {}", mass.value()),
        });
    }
    let sym = crate::linalg::norm(&(inertia - inertia.transpose()));
    if sym > T::lit(1e-12) || crate::linalg::cholesky(inertia, T::lit(1e-12)).is_none() {
        return Err(VehicleError::InvalidParameter {
            name: "inertia",
            reason: "must be symmetric positive definite".into(),
        });
    }
    Ok(())
}

/// Quadrotor with input `u = [f, tau1, tau2, tau3]`.
///
/// Thrust acts along body z; torques act directly on the angular momentum
/// rows. `gain_scale` multiplies the four nonzero gain entries and is one for
/// the nominal vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrotorModel<T: Real> {
    pub mass: T,
    pub inertia: Matrix3<T>,
    pub gravity: T,
    pub arm_length: T,
    pub torque_coeff: T,
    pub gain_scale: Vector4<T>,
}

impl<T: Real> Default for QuadrotorModel<T> {
    fn default() -> Self {
        QuadrotorModel {
            mass: T::lit(DEFAULT_MASS),
            inertia: Matrix3::from_diagonal(&Vector3::from(DEFAULT_INERTIA_DIAG.map(T::lit))),
            gravity: T::lit(GRAVITY),
            arm_length: T::lit(DEFAULT_ARM_LENGTH),
            torque_coeff: T::lit(DEFAULT_TORQUE_COEFF),
            gain_scale: Vector4::repeat(T::one()),
        }
    }
}

impl<T: Real> QuadrotorModel<T> {
    pub fn new(mass: T, inertia: Matrix3<T>, arm_length: T, torque_coeff: T) -> Result<Self, VehicleError> {
        validate_mass(mass, &inertia)?;
        if !(arm_length > T::zero()) || !(torque_coeff > T::zero()) {
            return Err(VehicleError::InvalidParameter {
                name: "arm_length/torque_coeff",
                reason: "must be positive".into(),
            });
        }
        Ok(QuadrotorModel {
            mass,
            inertia,
            arm_length,
            torque_coeff,
            ..Self::default()
        })
    }

    pub fn hover_thrust(&self) -> T {
        self.mass * self.gravity
    }

    pub fn rotor_config(&self) -> RotorConfig<T> {
        RotorConfig::x_config(self.arm_length, self.torque_coeff)
    }
}

impl<T: Real> HamiltonianModel<T> for QuadrotorModel<T> {
    fn mass_matrix(&self, _q: &GeneralizedCoord<T>) -> Matrix6<T> {
        block_mass(self.mass, &self.inertia)
    }

    fn potential(&self, q: &GeneralizedCoord<T>) -> T {
        self.mass * self.gravity * q.position().z
    }

    fn potential_gradient(&self, _q: &GeneralizedCoord<T>) -> SVector<T, 12> {
        gravity_gradient(self.mass * self.gravity)
    }

    fn input_gain(&self, _q: &GeneralizedCoord<T>) -> DMatrix<T> {
        let mut g = DMatrix::zeros(6, 4);
        for k in 0..4 {
            g[(2 + k, k)] = self.gain_scale[k];
        }
        g
    }

    fn input_dim(&self) -> usize {
        4
    }

    fn is_coordinate_independent(&self) -> bool {
        true
    }

    fn constrain_input(&self, u: &mut ControlInput<T>) {
        if u.0[0] < T::zero() {
            u.0[0] = T::zero();
        }
    }
}

/// Rigid body actuated by an arbitrary body wrench, `g = I6`.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidBodyModel<T: Real> {
    pub mass: T,
    pub inertia: Matrix3<T>,
    pub gravity: T,
}

impl<T: Real> RigidBodyModel<T> {
    /// No validation; use [`RigidBodyModel::try_new`] for checked construction.
    pub fn new(mass: T, inertia: Matrix3<T>, gravity: T) -> Self {
        RigidBodyModel { mass, inertia, gravity }
    }

    pub fn try_new(mass: T, inertia: Matrix3<T>, gravity: T) -> Result<Self, VehicleError> {
        validate_mass(mass, &inertia)?;
        Ok(Self::new(mass, inertia, gravity))
    }

    /// Unit mass and inertia.
    pub fn unit(gravity: T) -> Self {
        Self::new(T::one(), Matrix3::identity(), gravity)
    }
}

impl<T: Real> HamiltonianModel<T> for RigidBodyModel<T> {
    fn mass_matrix(&self, _q: &GeneralizedCoord<T>) -> Matrix6<T> {
        block_mass(self.mass, &self.inertia)
    }

    fn potential(&self, q: &GeneralizedCoord<T>) -> T {
        self.mass * self.gravity * q.position().z
    }

    fn potential_gradient(&self, _q: &GeneralizedCoord<T>) -> SVector<T, 12> {
        gravity_gradient(self.mass * self.gravity)
    }

    fn input_gain(&self, _q: &GeneralizedCoord<T>) -> DMatrix<T> {
        DMatrix::identity(6, 6)
    }

    fn input_dim(&self) -> usize {
        6
    }

    fn is_coordinate_independent(&self) -> bool {
        true
    }
}

/// Rotor layout and health.
///
/// X configuration, rotors numbered counterclockwise seen from above
/// starting at front-right: positions `(+a,-a)`, `(+a,+a)`, `(-a,+a)`,
/// `(-a,-a)` with `a = arm / sqrt(2)`, x forward and y left. Spin signs
/// `[+1, -1, +1, -1]` give the yaw torque `c_tau * s_i * f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotorConfig<T: Real> {
    pub positions: [Vector2<T>; 4],
    pub spins: [T; 4],
    pub torque_coeff: T,
    pub efficiencies: [T; 4],
}

impl<T: Real> RotorConfig<T> {
    pub fn x_config(arm_length: T, torque_coeff: T) -> Self {
        let a = arm_length / T::lit(2.0).sqrt();
        RotorConfig {
            positions: [
                Vector2::new(a, -a),
                Vector2::new(a, a),
                Vector2::new(-a, a),
                Vector2::new(-a, -a),
            ],
            spins: [T::one(), -T::one(), T::one(), -T::one()],
            torque_coeff,
            efficiencies: [T::one(); 4],
        }
    }

    pub fn with_efficiencies(mut self, delta: [T; 4]) -> Result<Self, VehicleError> {
        for d in delta {
            if !(d > T::zero() && d <= T::one()) {
                return Err(VehicleError::InvalidParameter {
                    name: "rotor_efficiencies",
                    reason: format!("each entry must lie in (0, 1], got {}", d.value()),
                });
            }
        }
        self.efficiencies = delta;
        Ok(self)
    }

    /// Maps rotor forces to `[f, tau1, tau2, tau3]`.
    pub fn allocation(&self) -> DMatrix<T> {
        let mut a = DMatrix::zeros(4, 4);
        for i in 0..4 {
            let pos = self.positions[i];
            a[(0, i)] = T::one();
            a[(1, i)] = pos.y;
            a[(2, i)] = -pos.x;
            a[(3, i)] = self.spins[i] * self.torque_coeff;
        }
        a
    }

    /// Rotor forces that realize `u` on healthy rotors.
    pub fn rotor_forces(&self, u: &ControlInput<T>) -> Result<DVector<T>, VehicleError> {
        solve(&self.allocation(), &u.0).ok_or(VehicleError::SingularAllocation)
    }

    fn produce(&self, forces: &DVector<T>) -> ControlInput<T> {
        let scaled = DVector::from_fn(4, |i, _| forces[i] * self.efficiencies[i]);
        ControlInput(self.allocation() * scaled)
    }

    /// Input actually delivered when each rotor produces `delta_i` times its
    /// commanded force.
    pub fn mixer(&self, u: &ControlInput<T>) -> Result<ControlInput<T>, VehicleError> {
        let (out, negative) = self.mix(u)?;
        match negative {
            None => Ok(out),
            Some((rotor, force)) => Err(VehicleError::NegativeRotorThrust {
                rotor,
                force,
                clamped: out.as_slice().iter().map(|x| x.value()).collect(),
            }),
        }
    }

    /// Like [`RotorConfig::mixer`] but clamps negative rotor forces to zero
    /// and returns whether any clamping happened.
    pub fn mixer_saturating(&self, u: &ControlInput<T>) -> Result<(ControlInput<T>, bool), VehicleError> {
        let (out, negative) = self.mix(u)?;
        Ok((out, negative.is_some()))
    }

    fn mix(&self, u: &ControlInput<T>) -> Result<(ControlInput<T>, Option<(usize, f64)>), VehicleError> {
        let mut forces = self.rotor_forces(u)?;
        let mut negative = None;
        for i in 0..4 {
            if forces[i] < T::zero() {
                if negative.is_none() {
                    negative = Some((i + 1, forces[i].value()));
                }
                forces[i] = T::zero();
            }
        }
        if negative.is_none() && self.efficiencies.iter().all(|&d| d == T::one()) {
            return Ok((u.clone(), None));
        }
        Ok((self.produce(&forces), negative))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::pseudo_inverse;

    fn quad() -> QuadrotorModel<f64> {
        QuadrotorModel::default()
    }

    #[test]
    fn hover_wrench() {
        let m = quad();
        let g = m.input_gain(&GeneralizedCoord::identity());
        let w = &g * DVector::from_column_slice(&[0.027 * 9.8, 0.0, 0.0, 0.0]);
        assert_eq!(w.as_slice(), &[0.0, 0.0, 0.027 * 9.8, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gain_pseudo_inverse_and_constancy() {
        let m = quad();
        let g0 = m.input_gain(&GeneralizedCoord::identity());
        let gp = pseudo_inverse(&g0).unwrap();
        assert!((gp * &g0 - DMatrix::identity(4, 4)).norm() < 1e-10);
        let q = GeneralizedCoord::from_pose(
            &Vector3::new(1.0, 2.0, 3.0),
            crate::geometry::so3_exp(&Vector3::new(0.5, 0.2, -1.0)).matrix(),
        );
        assert_eq!(m.input_gain(&q), g0);
    }

    #[test]
    fn healthy_mixer_is_identity() {
        let cfg = quad().rotor_config();
        let u = ControlInput::from_slice(&[0.3, 1e-4, -2e-4, 5e-5]);
        assert_eq!(cfg.mixer(&u).unwrap(), u);
    }

    #[test]
    fn defective_mixer_hover_oracle() {
        // Each rotor carries mg/4; rotors 1 and 2 (front) deliver 80%.
        let m = quad();
        let cfg = m.rotor_config().with_efficiencies([0.8, 0.8, 1.0, 1.0]).unwrap();
        let mg = m.hover_thrust();
        let out = cfg.mixer(&ControlInput::from_slice(&[mg, 0.0, 0.0, 0.0])).unwrap();
        let a = DEFAULT_ARM_LENGTH / 2f64.sqrt();
        let expected = [0.9 * mg, 0.0, 0.1 * a * mg, 0.0];
        for k in 0..4 {
            assert!((out.0[k] - expected[k]).abs() < 1e-15, "{k}: {} vs {}", out.0[k], expected[k]);
        }
        assert!(out.0[0] < mg);
    }

    #[test]
    fn dataset_range_deficit_is_weighted_by_one_minus_delta() {
        let m = quad();
        let mg = m.hover_thrust();
        let (d1, d2) = (0.94, 0.98);
        let cfg = m.rotor_config().with_efficiencies([d1, d2, 1.0, 1.0]).unwrap();
        let out = cfg.mixer(&ControlInput::from_slice(&[mg, 0.0, 0.0, 0.0])).unwrap();
        let a = DEFAULT_ARM_LENGTH / 2f64.sqrt();
        let f = mg / 4.0;
        assert!((mg - out.0[0] - f * ((1.0 - d1) + (1.0 - d2))).abs() < 1e-15);
        assert!((out.0[1] - f * a * ((1.0 - d1) - (1.0 - d2))).abs() < 1e-15);
        assert!((out.0[2] - f * a * ((1.0 - d1) + (1.0 - d2))).abs() < 1e-15);
        assert!((out.0[3] + f * DEFAULT_TORQUE_COEFF * ((1.0 - d1) - (1.0 - d2))).abs() < 1e-15);
    }

    #[test]
    fn negative_rotor_force_is_reported() {
        let cfg = quad().rotor_config();
        let u = ControlInput::from_slice(&[0.01, 0.01, 0.0, 0.0]);
        match cfg.mixer(&u) {
            Err(VehicleError::NegativeRotorThrust { rotor, force, clamped }) => {
                assert!(force < 0.0);
                assert!((1..=4).contains(&rotor));
                assert_eq!(clamped.len(), 4);
            }
            other => panic!("unexpected {other:?}"),
        }
        let (out, clamped) = cfg.mixer_saturating(&u).unwrap();
        assert!(clamped);
        assert!(out.0[0] > 0.01);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(RotorConfig::<f64>::x_config(0.04, 0.006).with_efficiencies([1.2, 1.0, 1.0, 1.0]).is_err());
        assert!(RotorConfig::<f64>::x_config(0.04, 0.006).with_efficiencies([0.0, 1.0, 1.0, 1.0]).is_err());
        assert!(QuadrotorModel::new(-1.0, Matrix3::identity(), 0.04, 0.006).is_err());
        assert!(QuadrotorModel::new(1.0, Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0)), 0.04, 0.006).is_err());
    }

    #[test]
    fn thrust_is_clamped_non_negative() {
        let mut u = ControlInput::from_slice(&[-1.0, 0.1, 0.0, 0.0]);
        quad().constrain_input(&mut u);
        assert_eq!(u.as_slice(), &[0.0, 0.1, 0.0, 0.0]);
    }
}
