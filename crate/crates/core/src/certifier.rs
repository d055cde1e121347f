//! Stability certificate: the comparison matrices Q1, Q2, Q3, their
//! positive-definiteness checks, the initial-domain test and a doubling
//! search for certified gains.

use crate::adaptation::AdaptationGains;
use crate::controller::{tracking_errors, ControllerError, ControllerGains};
use crate::dynamics::{HamiltonianModel, HamiltonianState, MIN_MASS_PIVOT};
use crate::linalg::{spd_inverse, sym_eigen};
use crate::trajectory::ReferencePoint;
use nalgebra::{Matrix2, Matrix6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum eigenvalue a matrix needs to count as positive definite.
pub const PD_TOLERANCE: f64 = 1e-12;
/// Doubling budget of [`synthesize_gains`].
pub const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CertifierError {
    #[error("certificate needs cp = cR and cv = cw (got cp={cp}, cR={cr}, cv={cv}, cw={cw})")]
    UnequalAdaptationGains { cp: f64, cr: f64, cv: f64, cw: f64 },
    #[error("invalid domain constants: {0}")]
    InvalidDomain(String),
    #[error("mass matrix is not positive definite")]
    SingularMass,
    #[error("no certified gains after {doublings} doublings")]
    SynthesisFailed {
        doublings: usize,
        report: Box<LyapunovReport>,
    },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

/// `alpha` bounds the initial attitude error, `beta` the initial angular
/// velocity error and `gamma` the reference angular velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainConstants {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl DomainConstants {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, CertifierError> {
        let d = DomainConstants { alpha, beta, gamma };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), CertifierError> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(CertifierError::InvalidDomain(format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        if !(self.beta > 0.0) || !(self.gamma >= 0.0) || !self.beta.is_finite() || !self.gamma.is_finite() {
            return Err(CertifierError::InvalidDomain(format!(
                "need beta > 0 and gamma >= 0, got beta={}, gamma={}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }
}

/// Extremal eigenvalues of `M^{-1}` and `M^{-1} K_d M^{-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelBounds {
    pub minv_min: f64,
    pub minv_max: f64,
    pub damping_min: f64,
    pub damping_max: f64,
}

impl ModelBounds {
    pub fn compute(mass: &Matrix6<f64>, gains: &ControllerGains) -> Result<Self, CertifierError> {
        let minv = spd_inverse(mass, MIN_MASS_PIVOT).ok_or(CertifierError::SingularMass)?;
        let (lm, _) = sym_eigen(&minv);
        let (ld, _) = sym_eigen(&(minv * gains.damping::<f64>() * minv));
        Ok(ModelBounds {
            minv_min: lm[0],
            minv_max: lm[5],
            damping_min: ld[0],
            damping_max: ld[5],
        })
    }
}

pub fn build_q1_q2(gains: &ControllerGains, bounds: &ModelBounds, c_ratio: f64, alpha: f64) -> (Matrix2<f64>, Matrix2<f64>) {
    let off = c_ratio * bounds.minv_max;
    let q1 = Matrix2::new(gains.kp.min(gains.kr), -off, -off, bounds.minv_min);
    let q2 = Matrix2::new(gains.kp.max(2.0 * gains.kr / (2.0 - alpha)), off, off, bounds.minv_max);
    (q1, q2)
}

pub fn build_q3(gains: &ControllerGains, bounds: &ModelBounds, c_ratio: f64, beta: f64, gamma: f64) -> Matrix2<f64> {
    let q1 = c_ratio * bounds.minv_min;
    let q2 = -c_ratio * (bounds.damping_max + beta + gamma * bounds.minv_max);
    let q3 = bounds.damping_min - c_ratio * gains.kp.max(3f64.sqrt() * gains.kr) * bounds.minv_max * bounds.minv_max;
    Matrix2::new(q1, q2, q2, q3)
}

/// Smallest eigenvalue of a symmetric 2x2 matrix in closed form.
pub fn min_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (m[(0, 0)], m[(0, 1)], m[(1, 1)]);
    let mean = 0.5 * (a + c);
    let radius = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    mean - radius
}

pub fn is_positive_definite_2x2(m: &Matrix2<f64>) -> bool {
    min_eigenvalue_2x2(m) > PD_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub q1: [[f64; 2]; 2],
    pub q2: [[f64; 2]; 2],
    pub q3: [[f64; 2]; 2],
    pub min_eigenvalues: [f64; 3],
    pub bounds: ModelBounds,
    pub c_ratio: f64,
    pub gains: ControllerGains,
    pub domain: DomainConstants,
    pub verdict: bool,
}

impl LyapunovReport {
    pub fn q1_pd(&self) -> bool {
        self.min_eigenvalues[0] > PD_TOLERANCE
    }
    pub fn q2_pd(&self) -> bool {
        self.min_eigenvalues[1] > PD_TOLERANCE
    }
    pub fn q3_pd(&self) -> bool {
        self.min_eigenvalues[2] > PD_TOLERANCE
    }

    pub fn to_text(&self) -> String {
        let fmt = |m: &[[f64; 2]; 2]| format!("[[{:e}, {:e}], [{:e}, {:e}]]", m[0][0], m[0][1], m[1][0], m[1][1]);
        let g = &self.gains;
        let b = &self.bounds;
        let d = &self.domain;
        [
            format!("gains: kp={} kR={} kv={} kw={}", g.kp, g.kr, g.kv, g.kw),
            format!("c1/c2: {}", self.c_ratio),
            format!("domain: alpha={} beta={} gamma={}", d.alpha, d.beta, d.gamma),
            format!("lambda(M^-1): min={:e} max={:e}", b.minv_min, b.minv_max),
            format!("lambda(M^-1 Kd M^-1): min={:e} max={:e}", b.damping_min, b.damping_max),
            format!("Q1 = {}  min eig {:e}", fmt(&self.q1), self.min_eigenvalues[0]),
            format!("Q2 = {}  min eig {:e}", fmt(&self.q2), self.min_eigenvalues[1]),
            format!("Q3 = {}  min eig {:e}", fmt(&self.q3), self.min_eigenvalues[2]),
            format!("verdict: {}", if self.verdict { "pass" } else { "fail" }),
        ]
        .join("\n")
    }
}

fn to_array(m: &Matrix2<f64>) -> [[f64; 2]; 2] {
    [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]]
}

/// Evaluates the certificate for an explicit ratio `c1/c2`.
pub fn certify_ratio(
    gains: &ControllerGains,
    c_ratio: f64,
    mass: &Matrix6<f64>,
    domain: &DomainConstants,
) -> Result<LyapunovReport, CertifierError> {
    domain.validate()?;
    gains.validate()?;
    let bounds = ModelBounds::compute(mass, gains)?;
    let (q1, q2) = build_q1_q2(gains, &bounds, c_ratio, domain.alpha);
    let q3 = build_q3(gains, &bounds, c_ratio, domain.beta, domain.gamma);
    let min_eigenvalues = [min_eigenvalue_2x2(&q1), min_eigenvalue_2x2(&q2), min_eigenvalue_2x2(&q3)];
    Ok(LyapunovReport {
        q1: to_array(&q1),
        q2: to_array(&q2),
        q3: to_array(&q3),
        min_eigenvalues,
        bounds,
        c_ratio,
        gains: *gains,
        domain: *domain,
        verdict: min_eigenvalues.iter().all(|&l| l > PD_TOLERANCE),
    })
}

/// Certificate for the given gains; requires `cp = cR` and `cv = cw`.
pub fn certify(
    gains: &ControllerGains,
    adaptation: &AdaptationGains,
    mass: &Matrix6<f64>,
    domain: &DomainConstants,
) -> Result<LyapunovReport, CertifierError> {
    if adaptation.cp != adaptation.cr || adaptation.cv != adaptation.cw {
        return Err(CertifierError::UnequalAdaptationGains {
            cp: adaptation.cp,
            cr: adaptation.cr,
            cv: adaptation.cv,
            cw: adaptation.cw,
        });
    }
    certify_ratio(gains, adaptation.cp / adaptation.cv, mass, domain)
}

/// `tr(I - R*^T R) < alpha` and `|e_w| <= beta`.
pub fn check_initial_domain<M: HamiltonianModel<f64> + ?Sized>(
    x0: &HamiltonianState<f64>,
    ref0: &ReferencePoint<f64>,
    alpha: f64,
    beta: f64,
    model: &M,
) -> Result<bool, CertifierError> {
    let unit = ControllerGains {
        kp: 1.0,
        kr: 1.0,
        kv: 1.0,
        kw: 1.0,
    };
    let e = tracking_errors(x0, ref0, &unit, model)?;
    Ok(e.attitude_trace < alpha && e.e_w.norm() <= beta)
}

/// Outcome of a successful gain search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub gains: ControllerGains,
    pub doublings: usize,
    pub report: LyapunovReport,
}

/// Doubles `(kv, kw)` while Q3 fails and `(kp, kR)` while Q1 or Q2 fails,
/// until the certificate passes or [`MAX_DOUBLINGS`] rounds are spent.
pub fn synthesize_gains(
    mass: &Matrix6<f64>,
    domain: &DomainConstants,
    c_ratio: f64,
    initial: &ControllerGains,
) -> Result<Synthesis, CertifierError> {
    let mut gains = *initial;
    let mut report = certify_ratio(&gains, c_ratio, mass, domain)?;
    for doublings in 0..=MAX_DOUBLINGS {
        if report.verdict {
            return Ok(Synthesis {
                gains,
                doublings,
                report,
            });
        }
        if doublings == MAX_DOUBLINGS {
            break;
        }
        if !report.q3_pd() {
            gains.kv *= 2.0;
            gains.kw *= 2.0;
        }
        if !report.q1_pd() || !report.q2_pd() {
            gains.kp *= 2.0;
            gains.kr *= 2.0;
        }
        report = certify_ratio(&gains, c_ratio, mass, domain)?;
    }
    Err(CertifierError::SynthesisFailed {
        doublings: MAX_DOUBLINGS,
        report: Box::new(report),
    })
}

/// Largest `c1/c2` for which any gains can pass, `lambda_min / lambda_max^2`
/// of `M^{-1}` (Q1 and Q3 together require `c^4 < lambda_min^2 / lambda_max^4`).
pub fn max_certifiable_ratio(mass: &Matrix6<f64>) -> Result<f64, CertifierError> {
    let minv = spd_inverse(mass, MIN_MASS_PIVOT).ok_or(CertifierError::SingularMass)?;
    let (l, _) = sym_eigen(&minv);
    Ok(l[0] / (l[5] * l[5]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::QuadrotorModel;
    use crate::dynamics::HamiltonianModel;
    use crate::geometry::{GeneralizedCoord, RotationMatrix};
    use nalgebra::{Matrix3, Vector3, Vector6};
    use proptest::prelude::*;

    fn unit_bounds(k: f64) -> ModelBounds {
        ModelBounds {
            minv_min: 1.0,
            minv_max: 1.0,
            damping_min: k,
            damping_max: k,
        }
    }

    #[test]
    fn q1_example() {
        let gains = ControllerGains::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let (q1, _) = build_q1_q2(&gains, &unit_bounds(1.0), 0.1, 1.0);
        assert_eq!(q1, Matrix2::new(1.0, -0.1, -0.1, 1.0));
        assert!((min_eigenvalue_2x2(&q1) - 0.9).abs() < 1e-15);
        let (q1, _) = build_q1_q2(&gains, &unit_bounds(1.0), 0.0, 1.0);
        assert!(q1[(0, 1)] == 0.0 && is_positive_definite_2x2(&q1));
    }

    #[test]
    fn q2_blows_up_near_alpha_two() {
        let gains = ControllerGains::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let (_, q2) = build_q1_q2(&gains, &unit_bounds(1.0), 0.1, 1.9);
        assert!((q2[(0, 0)] - 20.0).abs() < 1e-12);
        let (_, q2) = build_q1_q2(&gains, &unit_bounds(1.0), 0.1, 2.0 - 1e-12);
        assert!(q2[(0, 0)] > 1e12);
    }

    #[test]
    fn q3_examples() {
        let gains = ControllerGains::new(1.0, 1.0, 10.0, 10.0).unwrap();
        let q3 = build_q3(&gains, &unit_bounds(10.0), 0.0, 0.5, 0.3);
        assert_eq!((q3[(0, 0)], q3[(0, 1)]), (0.0, 0.0));
        assert!(!is_positive_definite_2x2(&q3));

        let q3 = build_q3(&gains, &unit_bounds(10.0), 0.01, 0.0, 0.0);
        assert!((q3[(0, 0)] - 0.01).abs() < 1e-15);
        assert!((q3[(0, 1)] + 0.1).abs() < 1e-15);
        assert!((q3[(1, 1)] - (10.0 - 0.01 * 3f64.sqrt())).abs() < 1e-12);
        let det = q3[(0, 0)] * q3[(1, 1)] - q3[(0, 1)] * q3[(0, 1)];
        assert!((det - 0.0898).abs() < 1e-3);
        assert!(is_positive_definite_2x2(&q3));

        // beta enters q2 only, linearly.
        let a = build_q3(&gains, &unit_bounds(10.0), 0.01, 1.0, 0.0);
        let b = build_q3(&gains, &unit_bounds(10.0), 0.01, 2.0, 0.0);
        assert_eq!((a[(0, 0)], a[(1, 1)]), (b[(0, 0)], b[(1, 1)]));
        assert!(((b[(0, 1)] - a[(0, 1)]) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn unequal_adaptation_gains_are_rejected() {
        let m = Matrix6::identity();
        let d = DomainConstants::new(1.0, 0.5, 0.0).unwrap();
        assert!(matches!(
            certify(&ControllerGains::quadrotor(), &AdaptationGains::quadrotor(), &m, &d),
            Err(CertifierError::UnequalAdaptationGains { .. })
        ));
    }

    #[test]
    fn initial_domain_examples() {
        let model = QuadrotorModel::<f64>::default();
        let reference = crate::trajectory::ReferencePoint::stationary(Vector3::zeros(), Matrix3::identity());
        let at_ref = HamiltonianState::new(GeneralizedCoord::identity(), Vector6::zeros(), 0.0);
        assert!(check_initial_domain(&at_ref, &reference, 1e-6, 0.0, &model).unwrap());
        let flipped = HamiltonianState::new(
            GeneralizedCoord::from_pose(&Vector3::zeros(), RotationMatrix::about_z(std::f64::consts::PI).matrix()),
            Vector6::zeros(),
            0.0,
        );
        assert!(!check_initial_domain(&flipped, &reference, 1.99, 1.0, &model).unwrap());
        let unit = crate::vehicle::RigidBodyModel::unit(0.0);
        let spinning = HamiltonianState::new(GeneralizedCoord::identity(), Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.5), 0.0);
        assert!(check_initial_domain(&spinning, &reference, 1.0, 0.5, &unit).unwrap());
        assert!(!check_initial_domain(&spinning, &reference, 1.0, 0.4999, &unit).unwrap());
    }

    #[test]
    fn synthesis_on_unit_mass() {
        let m = Matrix6::identity();
        let d = DomainConstants::new(1.0, 0.1, 0.0).unwrap();
        let seed = ControllerGains::new(0.1, 0.1, 0.1, 0.1).unwrap();
        let s = synthesize_gains(&m, &d, 0.1, &seed).unwrap();
        assert!(s.report.verdict);
        assert_eq!(s.doublings, 0);
        assert_eq!(s.gains, seed);

        let low = ControllerGains::new(0.01, 0.01, 0.1, 0.1).unwrap();
        let s = synthesize_gains(&m, &d, 0.1, &low).unwrap();
        assert!(s.report.verdict && s.doublings > 0);
    }

    #[test]
    fn synthesis_fails_for_huge_ratio() {
        let m = Matrix6::identity();
        let d = DomainConstants::new(1.0, 0.1, 0.0).unwrap();
        let seed = ControllerGains::new(1.0, 1.0, 1e-3, 1e-3).unwrap();
        assert!(matches!(
            synthesize_gains(&m, &d, 1e3, &seed),
            Err(CertifierError::SynthesisFailed { .. })
        ));
    }

    #[test]
    fn unit_mass_pd_region_in_damping_is_an_interval() {
        // With K_d = k I and unit M, det(Q3) is a concave quadratic in k, so
        // the PD set is a single interval; it is bounded above.
        let gains = |k: f64| ControllerGains::new(1.0, 1.0, k, k).unwrap();
        let pd: Vec<bool> = (1..4000)
            .map(|i| {
                let k = i as f64 * 0.01;
                is_positive_definite_2x2(&build_q3(&gains(k), &unit_bounds(k), 0.05, 0.1, 0.0))
            })
            .collect();
        let first = pd.iter().position(|&p| p).unwrap();
        let last = pd.iter().rposition(|&p| p).unwrap();
        assert!(pd[first..=last].iter().all(|&p| p));
        assert!(last < pd.len() - 1);
    }

    #[test]
    fn quadrotor_ratio_limit() {
        let m = QuadrotorModel::<f64>::default().mass_matrix(&GeneralizedCoord::identity());
        let limit = max_certifiable_ratio(&m).unwrap();
        assert!((limit - 1.4e-5f64.powi(2) / 0.027).abs() < 1e-12 * limit);
        assert!(limit < 0.08);
    }

    proptest! {
        #[test]
        fn pd_verdict_matches_trace_determinant(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64) {
            let m = Matrix2::new(a, b, b, c);
            let det = a * c - b * b;
            let oracle = det > 0.0 && a + c > 0.0;
            let scale = a.abs() + b.abs() + c.abs();
            // Skip inputs within rounding of the boundary.
            prop_assume!(det.abs() > 1e-9 * scale * scale && min_eigenvalue_2x2(&m).abs() > 1e-9);
            prop_assert_eq!(is_positive_definite_2x2(&m), oracle);
        }
    }
}
