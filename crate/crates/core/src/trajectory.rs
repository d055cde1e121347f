//! Reference trajectories and the flat-output attitude construction.

use crate::geometry::vee_skew_part;
use crate::real::Real;
use crate::vehicle::GRAVITY;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error("thrust direction vanishes (|a + g e3| = {norm:e}) at t = {t}")]
    FreeFallSingularity { t: f64, norm: f64 },
    #[error("invalid trajectory parameter: {0}")]
    InvalidParameter(String),
}

/// Desired state at one instant. `v` and `a` are world-frame derivatives of
/// `p`; `w` and `w_dot` are body-frame angular rates of `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint<T: Real> {
    pub t: T,
    pub p: Vector3<T>,
    pub v: Vector3<T>,
    pub a: Vector3<T>,
    pub r: Matrix3<T>,
    pub w: Vector3<T>,
    pub w_dot: Vector3<T>,
}

impl ReferencePoint<f64> {
    pub fn cast<T: Real>(&self) -> ReferencePoint<T> {
        ReferencePoint {
            t: T::lit(self.t),
            p: self.p.map(T::lit),
            v: self.v.map(T::lit),
            a: self.a.map(T::lit),
            r: self.r.map(T::lit),
            w: self.w.map(T::lit),
            w_dot: self.w_dot.map(T::lit),
        }
    }
}

impl<T: Real> ReferencePoint<T> {
    /// Stationary reference at `p` with attitude `r`.
    pub fn stationary(p: Vector3<T>, r: Matrix3<T>) -> Self {
        ReferencePoint {
            t: T::zero(),
            p,
            v: Vector3::zeros(),
            a: Vector3::zeros(),
            r,
            w: Vector3::zeros(),
            w_dot: Vector3::zeros(),
        }
    }
}

/// A value with its first and second time derivatives.
#[derive(Debug, Clone, Copy)]
struct Jet {
    x: Vector3<f64>,
    d: Vector3<f64>,
    dd: Vector3<f64>,
}

impl Jet {
    fn normalized(&self) -> Jet {
        let r = self.x.norm();
        let n = self.x / r;
        let r_dot = n.dot(&self.d);
        let n_dot = (self.d - n * r_dot) / r;
        let r_ddot = n_dot.dot(&self.d) + n.dot(&self.dd);
        let n_ddot = (self.dd - n_dot * (2.0 * r_dot) - n * r_ddot) / r;
        Jet { x: n, d: n_dot, dd: n_ddot }
    }

    fn cross(&self, o: &Jet) -> Jet {
        Jet {
            x: self.x.cross(&o.x),
            d: self.d.cross(&o.x) + self.x.cross(&o.d),
            dd: self.dd.cross(&o.x) + self.d.cross(&o.d) * 2.0 + self.x.cross(&o.dd),
        }
    }
}

/// Flat outputs: acceleration, jerk and snap of the position, and heading
/// with its derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatOutputs {
    pub acc: Vector3<f64>,
    pub jerk: Vector3<f64>,
    pub snap: Vector3<f64>,
    pub psi: f64,
    pub psi_dot: f64,
    pub psi_ddot: f64,
}

/// Attitude whose body z axis is aligned with `a + g e3` and whose body x
/// axis follows heading `psi`:
/// `b3 = (a + g e3)/|.|`, `b2 = b3 x h / |.|`, `b1 = b2 x b3`, `h = [cos psi, sin psi, 0]`.
pub fn flat_outputs_to_attitude(acc: &Vector3<f64>, psi: f64, gravity: f64) -> Result<Matrix3<f64>, TrajectoryError> {
    let flat = FlatOutputs {
        acc: *acc,
        jerk: Vector3::zeros(),
        snap: Vector3::zeros(),
        psi,
        psi_dot: 0.0,
        psi_ddot: 0.0,
    };
    Ok(flat_attitude_with_rates(&flat, gravity)?.0)
}

/// The attitude of [`flat_outputs_to_attitude`] together with the body rate
/// `w = (R^T R_dot)^v` and its derivative `w_dot = (R^T R_ddot)^v`.
pub fn flat_attitude_with_rates(
    flat: &FlatOutputs,
    gravity: f64,
) -> Result<(Matrix3<f64>, Vector3<f64>, Vector3<f64>), TrajectoryError> {
    let thrust = Jet {
        x: flat.acc + Vector3::z() * gravity,
        d: flat.jerk,
        dd: flat.snap,
    };
    let norm = thrust.x.norm();
    if norm < 1e-6 {
        return Err(TrajectoryError::FreeFallSingularity { t: f64::NAN, norm });
    }
    let (s, c) = flat.psi.sin_cos();
    let heading = Jet {
        x: Vector3::new(c, s, 0.0),
        d: Vector3::new(-s, c, 0.0) * flat.psi_dot,
        dd: Vector3::new(-s, c, 0.0) * flat.psi_ddot - Vector3::new(c, s, 0.0) * (flat.psi_dot * flat.psi_dot),
    };
    let b3 = thrust.normalized();
    let side = b3.cross(&heading);
    if side.x.norm() < 1e-9 {
        return Err(TrajectoryError::InvalidParameter(
            "heading is parallel to the thrust direction".into(),
        ));
    }
    let b2 = side.normalized();
    let b1 = b2.cross(&b3);
    let r = Matrix3::from_columns(&[b1.x, b2.x, b3.x]);
    let r_dot = Matrix3::from_columns(&[b1.d, b2.d, b3.d]);
    let r_ddot = Matrix3::from_columns(&[b1.dd, b2.dd, b3.dd]);
    let w = vee_skew_part(&(r.transpose() * r_dot));
    let w_dot = vee_skew_part(&(r.transpose() * r_ddot));
    Ok((r, w, w_dot))
}

/// Heading `psi(t) = psi0 + rate * t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heading {
    pub psi0: f64,
    pub rate: f64,
}

impl Default for Heading {
    fn default() -> Self {
        Heading { psi0: 0.0, rate: 0.0 }
    }
}

pub const DEFAULT_SPIRAL_RADIUS: f64 = 0.5;
pub const DEFAULT_SPIRAL_RATE: f64 = 0.5;
pub const DEFAULT_SPIRAL_CLIMB: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceTrajectory {
    Hover {
        position: [f64; 3],
        heading: Heading,
    },
    /// `p(t) = [r cos(wt), r sin(wt), c t]`.
    Spiral {
        radius: f64,
        rate: f64,
        climb: f64,
        heading: Heading,
    },
}

impl ReferenceTrajectory {
    pub fn hover(position: [f64; 3]) -> Self {
        ReferenceTrajectory::Hover {
            position,
            heading: Heading::default(),
        }
    }

    pub fn spiral(radius: f64, rate: f64, climb: f64, heading: Heading) -> Result<Self, TrajectoryError> {
        if !(radius > 0.0 && rate > 0.0 && climb >= 0.0) {
            return Err(TrajectoryError::InvalidParameter(format!(
                "spiral needs radius > 0, rate > 0, climb >= 0 (got {radius}, {rate}, {climb})"
            )));
        }
        Ok(ReferenceTrajectory::Spiral {
            radius,
            rate,
            climb,
            heading,
        })
    }

    pub fn default_spiral() -> Self {
        ReferenceTrajectory::Spiral {
            radius: DEFAULT_SPIRAL_RADIUS,
            rate: DEFAULT_SPIRAL_RATE,
            climb: DEFAULT_SPIRAL_CLIMB,
            heading: Heading::default(),
        }
    }

    fn heading(&self) -> Heading {
        match self {
            ReferenceTrajectory::Hover { heading, .. } | ReferenceTrajectory::Spiral { heading, .. } => *heading,
        }
    }

    /// Position and its first four derivatives.
    pub fn position_derivatives(&self, t: f64) -> [Vector3<f64>; 5] {
        match *self {
            ReferenceTrajectory::Hover { position, .. } => {
                let z = Vector3::zeros();
                [Vector3::from(position), z, z, z, z]
            }
            ReferenceTrajectory::Spiral {
                radius, rate, climb, ..
            } => {
                let (s, c) = (rate * t).sin_cos();
                let r = radius;
                let w = rate;
                [
                    Vector3::new(r * c, r * s, climb * t),
                    Vector3::new(-r * w * s, r * w * c, climb),
                    Vector3::new(-r * w * w * c, -r * w * w * s, 0.0),
                    Vector3::new(r * w.powi(3) * s, -r * w.powi(3) * c, 0.0),
                    Vector3::new(r * w.powi(4) * c, r * w.powi(4) * s, 0.0),
                ]
            }
        }
    }

    pub fn sample(&self, t: f64) -> Result<ReferencePoint<f64>, TrajectoryError> {
        let [p, v, a, jerk, snap] = self.position_derivatives(t);
        let h = self.heading();
        let flat = FlatOutputs {
            acc: a,
            jerk,
            snap,
            psi: h.psi0 + h.rate * t,
            psi_dot: h.rate,
            psi_ddot: 0.0,
        };
        let (r, w, w_dot) = flat_attitude_with_rates(&flat, GRAVITY).map_err(|e| match e {
            TrajectoryError::FreeFallSingularity { norm, .. } => TrajectoryError::FreeFallSingularity { t, norm },
            other => other,
        })?;
        Ok(ReferencePoint {
            t,
            p,
            v,
            a,
            r,
            w,
            w_dot,
        })
    }

    /// Characteristic period used for bound sampling.
    pub fn period(&self) -> f64 {
        match *self {
            ReferenceTrajectory::Hover { heading, .. } => {
                if heading.rate != 0.0 {
                    std::f64::consts::TAU / heading.rate.abs()
                } else {
                    1.0
                }
            }
            ReferenceTrajectory::Spiral { rate, .. } => std::f64::consts::TAU / rate,
        }
    }

    /// Declared bound `gamma >= sup |w*|`: 2% above the maximum over 512
    /// samples of one period.
    pub fn gamma(&self) -> Result<f64, TrajectoryError> {
        let period = self.period();
        let mut max = 0.0f64;
        for k in 0..512 {
            let t = period * k as f64 / 512.0;
            max = max.max(self.sample(t)?.w.norm());
        }
        Ok(1.02 * max)
    }
}

/// Body rate `(R^T R_dot)^v` from central differences of an attitude path.
pub fn finite_difference_rate(attitude: impl Fn(f64) -> Matrix3<f64>, t: f64, h: f64) -> Vector3<f64> {
    let r_dot = (attitude(t + h) - attitude(t - h)) / (2.0 * h);
    vee_skew_part(&(attitude(t).transpose() * r_dot))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_at_origin_time() {
        let tr = ReferenceTrajectory::default_spiral();
        let s = tr.sample(0.0).unwrap();
        assert_eq!(s.p, Vector3::new(0.5, 0.0, 0.0));
        assert!((s.v - Vector3::new(0.0, 0.25, 0.05)).norm() < 1e-16);
    }

    #[test]
    fn spiral_speed_is_constant() {
        let tr = ReferenceTrajectory::default_spiral();
        let speed = (0.25f64 * 0.25 + 0.05 * 0.05).sqrt();
        for k in 0..50 {
            let s = tr.sample(k as f64 * 0.37).unwrap();
            assert!((s.v.norm() - speed).abs() < 1e-14);
        }
    }

    #[test]
    fn gamma_matches_dense_sampling() {
        let tr = ReferenceTrajectory::default_spiral();
        let gamma = tr.gamma().unwrap();
        let period = tr.period();
        let dense = (0..20_000)
            .map(|k| tr.sample(period * k as f64 / 20_000.0).unwrap().w.norm())
            .fold(0.0, f64::max);
        assert!(gamma.is_finite());
        assert!(gamma >= dense);
        assert!((gamma - dense).abs() <= 0.05 * dense);
    }

    #[test]
    fn hover_attitude_is_identity() {
        let (r, w, w_dot) = flat_attitude_with_rates(
            &FlatOutputs {
                acc: Vector3::zeros(),
                jerk: Vector3::zeros(),
                snap: Vector3::zeros(),
                psi: 0.0,
                psi_dot: 0.0,
                psi_ddot: 0.0,
            },
            GRAVITY,
        )
        .unwrap();
        assert!((r - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(w, Vector3::zeros());
        assert_eq!(w_dot, Vector3::zeros());
    }

    #[test]
    fn lateral_acceleration_tilts_about_y() {
        let a = 2.0;
        let r = flat_outputs_to_attitude(&Vector3::new(a, 0.0, 0.0), 0.0, GRAVITY).unwrap();
        let theta = a.atan2(GRAVITY);
        let (s, c) = theta.sin_cos();
        let ry = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        assert!((r - ry).norm() < 1e-14);
    }

    #[test]
    fn free_fall_is_singular() {
        assert!(matches!(
            flat_outputs_to_attitude(&Vector3::new(0.0, 0.0, -GRAVITY), 0.0, GRAVITY),
            Err(TrajectoryError::FreeFallSingularity { .. })
        ));
    }

    #[test]
    fn attitude_is_orthonormal_and_rates_match_finite_differences() {
        let tr = ReferenceTrajectory::spiral(0.8, 1.3, 0.1, Heading { psi0: 0.2, rate: 0.3 }).unwrap();
        let h = 1e-4;
        for k in 0..40 {
            let t = 0.23 * k as f64;
            let s = tr.sample(t).unwrap();
            assert!((s.r.transpose() * s.r - Matrix3::identity()).norm() <= 1e-10);
            let fd = finite_difference_rate(|t| tr.sample(t).unwrap().r, t, h);
            assert!((fd - s.w).norm() <= 1e-6, "t={t}: {fd} vs {}", s.w);
            let fd_dot = (tr.sample(t + h).unwrap().w - tr.sample(t - h).unwrap().w) / (2.0 * h);
            assert!((fd_dot - s.w_dot).norm() <= 1e-6);
        }
    }
}
