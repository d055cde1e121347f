//! Online estimation of disturbance weights and the coupled closed-loop
//! integrator that advances plant and estimate through the same RK4 stages.

use crate::controller::{control, AttitudeMode, ControlOutput, ControllerError, ControllerGains, TrackingErrors};
use crate::disturbance::{DisturbanceError, DisturbanceFeatures};
use crate::dynamics::{check_step, mass_inverse, vector_field, ControlInput, CoordRate, DynamicsError, HamiltonianModel, HamiltonianState, Wrench};
use crate::geometry::{GeneralizedCoord, Reprojection};
use crate::linalg::norm;
use crate::real::Real;
use crate::trajectory::{ReferencePoint, TrajectoryError};
use crate::vehicle::VehicleError;
use nalgebra::{DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptationError {
    #[error("invalid adaptation gains: {0}")]
    InvalidGains(String),
    #[error(transparent)]
    Disturbance(#[from] DisturbanceError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationGains {
    pub cp: f64,
    pub cr: f64,
    pub cv: f64,
    pub cw: f64,
}

impl AdaptationGains {
    pub fn new(cp: f64, cr: f64, cv: f64, cw: f64) -> Result<Self, AdaptationError> {
        let g = AdaptationGains { cp, cr, cv, cw };
        g.validate()?;
        Ok(g)
    }

    /// Gains of the quadrotor experiments.
    pub fn quadrotor() -> Self {
        AdaptationGains {
            cp: 0.04,
            cr: 0.5,
            cv: 0.04,
            cw: 0.5,
        }
    }

    /// `cp = cR = c1`, `cv = cw = c2`.
    pub fn equal(c1: f64, c2: f64) -> Self {
        AdaptationGains {
            cp: c1,
            cr: c1,
            cv: c2,
            cw: c2,
        }
    }

    pub fn validate(&self) -> Result<(), AdaptationError> {
        for (name, v) in [("cp", self.cp), ("cR", self.cr), ("cv", self.cv), ("cw", self.cw)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AdaptationError::InvalidGains(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which error combination drives the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationLaw {
    /// `a_dot = W^T [cp e_p + cv e_v; cR e_R + cw e_w]`.
    #[default]
    PerChannel,
    /// `a_dot = W^T M^{-1} (C1 e + C2 p_e)` with `C1 = diag(cp I, cR I)`,
    /// `C2 = diag(cv I, cw I)` and gain-weighted `e`. This is the form under
    /// which the Lyapunov candidate is non-increasing for a general `M`.
    EnergyConsistent,
}

fn blk<T: Real>(a: f64, b: f64) -> Vector6<T> {
    let (a, b) = (T::lit(a), T::lit(b));
    Vector6::new(a, a, a, b, b, b)
}

pub fn adaptation_rate<T, M, F>(
    x: &HamiltonianState<T>,
    errors: &TrackingErrors<T>,
    features: &F,
    gains: &AdaptationGains,
    law: AdaptationLaw,
    model: &M,
) -> Result<DVector<T>, AdaptationError>
where
    T: Real,
    M: HamiltonianModel<T> + ?Sized,
    F: DisturbanceFeatures<T> + ?Sized,
{
    let signal: Vector6<T> = match law {
        AdaptationLaw::PerChannel => {
            errors.unweighted().component_mul(&blk(gains.cp, gains.cr))
                + errors.velocity_error().component_mul(&blk(gains.cv, gains.cw))
        }
        AdaptationLaw::EnergyConsistent => {
            let minv = mass_inverse(model, &x.q)?;
            minv * (errors.e.component_mul(&blk(gains.cp, gains.cr)) + errors.p_e.component_mul(&blk(gains.cv, gains.cw)))
        }
    };
    let w = features.features(&x.q, &x.p);
    Ok(w.transpose() * DVector::from_column_slice(signal.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEstimate<T: Real> {
    pub a: DVector<T>,
    pub t: T,
}

impl<T: Real> WeightEstimate<T> {
    pub fn zeros(p: usize) -> Self {
        WeightEstimate {
            a: DVector::zeros(p),
            t: T::zero(),
        }
    }

    /// Advance with a rate held constant over the step.
    pub fn step(&self, rate: &DVector<T>, dt: T) -> Self {
        WeightEstimate {
            a: &self.a + rate * dt,
            t: self.t + dt,
        }
    }

    /// Advance with the four RK4 stage rates of the coupled system.
    pub fn advance(&self, stages: &[DVector<T>; 4], dt: T) -> Self {
        let two = T::lit(2.0);
        let sum = &stages[0] + &stages[1] * two + &stages[2] * two + &stages[3];
        WeightEstimate {
            a: &self.a + sum * (dt / T::lit(6.0)),
            t: self.t + dt,
        }
    }

    /// `e_a = a - a*`.
    pub fn error(&self, truth: &DVector<T>) -> DVector<T> {
        &self.a - truth
    }
}

/// Everything needed to close the loop around a plant.
///
/// `model` is what the controller believes; `plant` is what is integrated.
/// `actuator` maps commanded to delivered inputs (for example a defective
/// mixer) and `disturbance` returns the true external wrench.
pub struct ClosedLoop<'a, T: Real> {
    pub model: &'a dyn HamiltonianModel<T>,
    pub plant: &'a dyn HamiltonianModel<T>,
    pub features: &'a dyn DisturbanceFeatures<T>,
    pub gains: ControllerGains,
    pub adaptation: Option<(AdaptationGains, AdaptationLaw)>,
    pub mode: AttitudeMode,
    pub actuator: &'a dyn Fn(&ControlInput<T>) -> Result<ControlInput<T>, AdaptationError>,
    pub disturbance: &'a dyn Fn(&HamiltonianState<T>) -> Wrench<T>,
    pub reference: &'a dyn Fn(T) -> Result<ReferencePoint<T>, AdaptationError>,
    pub reprojection: Reprojection,
    /// Optional bound on `|a_hat|`; off unless set.
    pub norm_cap: Option<f64>,
}

/// Rates of the coupled system at one stage.
pub struct StageRates<T: Real> {
    pub q_dot: CoordRate<T>,
    pub p_dot: Vector6<T>,
    pub a_dot: DVector<T>,
    pub output: ControlOutput<T>,
    pub applied: ControlInput<T>,
}

impl<'a, T: Real> ClosedLoop<'a, T> {
    /// Continuous closed-loop rates: the controller is evaluated at `(x, a)`.
    pub fn rates(&self, x: &HamiltonianState<T>, a: &DVector<T>) -> Result<StageRates<T>, AdaptationError> {
        let reference = (self.reference)(x.t)?;
        let output = control(x, &reference, a, &self.gains, self.model, self.features, self.mode)?;
        let applied = (self.actuator)(&output.u)?;
        let d = (self.disturbance)(x);
        let (q_dot, p_dot) = vector_field(x, &applied, &d, self.plant)?;
        let a_dot = match self.adaptation {
            Some((gains, law)) => adaptation_rate(x, &output.errors, self.features, &gains, law, self.model)?,
            None => DVector::zeros(a.len()),
        };
        Ok(StageRates {
            q_dot,
            p_dot,
            a_dot,
            output,
            applied,
        })
    }

    /// One RK4 step of plant and estimate together, then reprojection. Also
    /// returns the first-stage rates, which describe the state at the start of
    /// the step.
    pub fn step(
        &self,
        x: &HamiltonianState<T>,
        a: &WeightEstimate<T>,
        dt: T,
    ) -> Result<(HamiltonianState<T>, WeightEstimate<T>, StageRates<T>), AdaptationError> {
        check_step(dt)?;
        let half = dt * T::lit(0.5);
        let shift = |s: &StageRates<T>, h: T| -> (HamiltonianState<T>, DVector<T>) {
            (
                HamiltonianState {
                    q: GeneralizedCoord::from_vector(x.q.as_vector() + s.q_dot * h),
                    p: x.p + s.p_dot * h,
                    t: x.t + h,
                },
                &a.a + &s.a_dot * h,
            )
        };
        let k1 = self.rates(x, &a.a)?;
        let (x2, a2) = shift(&k1, half);
        let k2 = self.rates(&x2, &a2)?;
        let (x3, a3) = shift(&k2, half);
        let k3 = self.rates(&x3, &a3)?;
        let (x4, a4) = shift(&k3, dt);
        let k4 = self.rates(&x4, &a4)?;
        let two = T::lit(2.0);
        let sixth = dt / T::lit(6.0);
        let q = x.q.as_vector() + (k1.q_dot + k2.q_dot * two + k3.q_dot * two + k4.q_dot) * sixth;
        let p = x.p + (k1.p_dot + k2.p_dot * two + k3.p_dot * two + k4.p_dot) * sixth;
        let raw = HamiltonianState {
            q: GeneralizedCoord::from_vector(q),
            p,
            t: x.t + dt,
        };
        if !raw.is_finite() {
            return Err(DynamicsError::NonFiniteState { t: raw.t.value() }.into());
        }
        let next = HamiltonianState {
            q: raw.q.reprojected(self.reprojection).map_err(DynamicsError::from)?,
            ..raw
        };
        let mut estimate = a.advance(&[k1.a_dot.clone(), k2.a_dot, k3.a_dot, k4.a_dot], dt);
        if let Some(cap) = self.norm_cap {
            let n = norm(&estimate.a);
            if n > T::lit(cap) {
                estimate.a *= T::lit(cap) / n;
            }
        }
        if estimate.a.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteState { t: raw.t.value() }.into());
        }
        Ok((next, estimate, k1))
    }
}
