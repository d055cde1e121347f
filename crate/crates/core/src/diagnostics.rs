//! Numerical checks of the closed-loop error identities and of the Lyapunov
//! candidate along recorded runs.
//!
//! Every check recomputes the controller quantities from the logged state, so
//! a log read back from CSV gives the same report as the in-memory one.

use crate::certifier::{certify_ratio, CertifierError, DomainConstants};
use crate::controller::{control, e_matrix, ControlOutput, ControllerGains};
use crate::disturbance::DisturbanceFeatures;
use crate::dynamics::{mass_inverse, HamiltonianState};
use crate::geometry::{hat, GeneralizedCoord};
use crate::harness::{HarnessError, LogRow, RunLog};
use nalgebra::{DVector, Matrix2, Matrix6, Vector2, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Allowed per-step increase of the Lyapunov candidate.
pub const LYAPUNOV_STEP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("log has {0} rows, at least 3 are needed for differencing")]
    TooShort(usize),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Certifier(#[from] CertifierError),
    #[error("controller evaluation failed at t = {t}: {message}")]
    Controller { t: f64, message: String },
}

/// Controller quantities reconstructed at one logged sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub q: GeneralizedCoord<f64>,
    pub output: ControlOutput<f64>,
    pub zeta: Vector6<f64>,
    pub minv: Matrix6<f64>,
    /// `W(q, p)(a_hat - a*)`.
    pub disturbance_error: Vector6<f64>,
    pub e_a: DVector<f64>,
}

/// Recomputes errors and controller terms at every row of the log.
pub fn reconstruct(log: &RunLog) -> Result<Vec<Sample>, DiagnosticsError> {
    let cfg = &log.config;
    let vehicle = cfg.vehicle.build()?;
    let model = vehicle.model();
    let trajectory = cfg.trajectory.build()?;
    let features = cfg.features()?;
    let a_star = cfg.true_weights()?;
    let eval = |row: &LogRow| -> Result<Sample, DiagnosticsError> {
        let fail = |message: String| DiagnosticsError::Controller { t: row.t, message };
        let q = row.coord();
        let zeta = row.velocity();
        let x = HamiltonianState::from_velocity(q, &zeta, row.t, model);
        let reference = trajectory.sample(row.t).map_err(|e| fail(e.to_string()))?;
        let a_hat = DVector::from_column_slice(&row.a_hat);
        let output = control(&x, &reference, &a_hat, &cfg.gains, model, &features, cfg.attitude).map_err(|e| fail(e.to_string()))?;
        let minv = mass_inverse(model, &q).map_err(|e| fail(e.to_string()))?;
        let e_a = &a_hat - &a_star;
        let w = DisturbanceFeatures::<f64>::features(&features, &q, &x.p);
        let d = w * &e_a;
        Ok(Sample {
            t: row.t,
            q,
            output,
            zeta,
            minv,
            disturbance_error: Vector6::from_iterator(d.iter().copied()),
            e_a,
        })
    };
    log.rows.iter().map(eval).collect()
}

fn interior<F>(samples: &[Sample], f: F) -> Result<f64, DiagnosticsError>
where
    F: Fn(&Sample, &Sample, &Sample) -> f64 + Sync,
{
    if samples.len() < 3 {
        return Err(DiagnosticsError::TooShort(samples.len()));
    }
    Ok(samples.par_windows(3).map(|w| f(&w[0], &w[1], &w[2])).reduce(|| 0.0, f64::max))
}

fn central(prev: &Vector6<f64>, next: &Vector6<f64>, span: f64) -> Vector6<f64> {
    (next - prev) / span
}

/// Right-hand side of the coordinate-error identity,
/// `-blkdiag(hat(w), 0) e + blkdiag(kp I, kR E(R, R*)) M^{-1} p_e`.
pub fn edot_model(s: &Sample, gains: &ControllerGains) -> Vector6<f64> {
    let e = &s.output.errors;
    let w_hat = hat(&s.zeta.fixed_rows::<3>(3).into_owned());
    let ep = e.e.fixed_rows::<3>(0).into_owned();
    let rate = s.minv * e.p_e;
    let em = e_matrix(&s.q.rotation(), &s.output.reference.r);
    let lin = -(w_hat * ep) + rate.fixed_rows::<3>(0) * gains.kp;
    let ang = em * rate.fixed_rows::<3>(3) * gains.kr;
    Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

/// Right-hand side of the momentum-error identity,
/// `-e - K_d M^{-1} p_e - W e_a`.
pub fn pedot_model(s: &Sample, gains: &ControllerGains) -> Vector6<f64> {
    let e = &s.output.errors;
    -e.e - gains.damping::<f64>() * s.minv * e.p_e - s.disturbance_error
}

/// Largest `|de/dt - model| / (1 + |e|)` over interior samples.
pub fn check_edot(samples: &[Sample], gains: &ControllerGains) -> Result<f64, DiagnosticsError> {
    interior(samples, |a, b, c| {
        let fd = central(&a.output.errors.e, &c.output.errors.e, c.t - a.t);
        (fd - edot_model(b, gains)).norm() / (1.0 + b.output.errors.e.norm())
    })
}

/// Largest `|dp_e/dt - model| / (1 + |p_e|)` over interior samples.
pub fn check_pedot(samples: &[Sample], gains: &ControllerGains) -> Result<f64, DiagnosticsError> {
    interior(samples, |a, b, c| {
        let fd = central(&a.output.errors.p_e, &c.output.errors.p_e, c.t - a.t);
        (fd - pedot_model(b, gains)).norm() / (1.0 + b.output.errors.p_e.norm())
    })
}

/// Largest `|dV_d/dt - e^T M^{-1} p_e| / (1 + |e^T M^{-1} p_e|)`.
pub fn check_potential_rate(samples: &[Sample], gains: &ControllerGains) -> Result<f64, DiagnosticsError> {
    interior(samples, |a, b, c| {
        let fd = (c.output.errors.potential(gains) - a.output.errors.potential(gains)) / (c.t - a.t);
        let exact = b.output.errors.potential_rate();
        (fd - exact).abs() / (1.0 + exact.abs())
    })
}

/// Smallest margin of `|e_R|^2 <= tr(I - R*^T R) <= 2/(2 - alpha) |e_R|^2`
/// over samples with `tr(I - R*^T R) < alpha`; `None` when no sample is in
/// the domain.
pub fn trace_sandwich_margin(samples: &[Sample], alpha: f64) -> Option<f64> {
    samples
        .iter()
        .filter(|s| s.output.errors.attitude_trace < alpha)
        .map(|s| {
            let tr = s.output.errors.attitude_trace;
            let er2 = s.output.errors.e_r.norm_squared();
            (tr - er2).min(2.0 / (2.0 - alpha) * er2 - tr)
        })
        .reduce(f64::min)
}

/// Which error stack forms the first entry of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorWeighting {
    /// `|[kp e_p; kR e_R]|`.
    Weighted,
    /// `|[e_p; e_R]|`.
    Unweighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichCheck {
    pub weighting: ErrorWeighting,
    pub lower_violations: usize,
    pub upper_violations: usize,
    /// Smallest `V - lower` and `upper - V` over in-domain samples.
    pub min_lower_margin: f64,
    pub min_upper_margin: f64,
}

impl SandwichCheck {
    pub fn holds(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCheck {
    pub c_ratio: f64,
    pub worst_increase: f64,
    pub monotonicity_violations: usize,
    pub weighted: SandwichCheck,
    pub unweighted: SandwichCheck,
    /// Times at which the run leaves the domain `tr(I - R*^T R) < alpha`.
    pub domain_exits: Vec<f64>,
    pub domain_occupancy: f64,
}

/// `H_d + (c1/c2) e^T M^{-1} p_e + |e_a|^2 / (2 c2)` with `c1 = cp`,
/// `c2 = cv`.
pub fn lyapunov(s: &Sample, gains: &ControllerGains, c1: f64, c2: f64) -> f64 {
    let e = &s.output.errors;
    e.desired_hamiltonian(gains) + c1 / c2 * e.potential_rate() + s.e_a.norm_squared() / (2.0 * c2)
}

fn quadratic(q: &Matrix2<f64>, z: Vector2<f64>) -> f64 {
    0.5 * (z.transpose() * q * z)[0]
}

pub fn check_lyapunov(
    samples: &[Sample],
    gains: &ControllerGains,
    c1: f64,
    c2: f64,
    mass: &Matrix6<f64>,
    domain: &DomainConstants,
) -> Result<LyapunovCheck, DiagnosticsError> {
    let c_ratio = c1 / c2;
    let report = certify_ratio(gains, c_ratio, mass, domain)?;
    let q1 = Matrix2::from_fn(|i, j| report.q1[i][j]);
    let q2 = Matrix2::from_fn(|i, j| report.q2[i][j]);
    let values: Vec<f64> = samples.iter().map(|s| lyapunov(s, gains, c1, c2)).collect();
    let inside: Vec<bool> = samples.iter().map(|s| s.output.errors.attitude_trace < domain.alpha).collect();

    let mut worst_increase = f64::NEG_INFINITY;
    let mut monotonicity_violations = 0;
    for k in 1..values.len() {
        if !(inside[k - 1] && inside[k]) {
            continue;
        }
        let inc = values[k] - values[k - 1];
        worst_increase = worst_increase.max(inc);
        if inc > LYAPUNOV_STEP_TOLERANCE {
            monotonicity_violations += 1;
        }
    }

    let sandwich = |weighting: ErrorWeighting| {
        let mut check = SandwichCheck {
            weighting,
            lower_violations: 0,
            upper_violations: 0,
            min_lower_margin: f64::INFINITY,
            min_upper_margin: f64::INFINITY,
        };
        for ((s, v), &ok) in samples.iter().zip(&values).zip(&inside) {
            if !ok {
                continue;
            }
            let e = &s.output.errors;
            let z1 = match weighting {
                ErrorWeighting::Weighted => e.e.norm(),
                ErrorWeighting::Unweighted => e.unweighted().norm(),
            };
            let z = Vector2::new(z1, e.p_e.norm());
            let tail = s.e_a.norm_squared() / (2.0 * c2);
            let lower = v - (quadratic(&q1, z) + tail);
            let upper = quadratic(&q2, z) + tail - v;
            let scale = 1e-12 * (1.0 + v.abs());
            if lower < -scale {
                check.lower_violations += 1;
            }
            if upper < -scale {
                check.upper_violations += 1;
            }
            check.min_lower_margin = check.min_lower_margin.min(lower);
            check.min_upper_margin = check.min_upper_margin.min(upper);
        }
        check
    };

    let domain_exits = (1..inside.len())
        .filter(|&k| inside[k - 1] && !inside[k])
        .map(|k| samples[k].t)
        .collect();
    let occupancy = inside.iter().filter(|&&b| b).count() as f64 / inside.len().max(1) as f64;
    Ok(LyapunovCheck {
        c_ratio,
        worst_increase,
        monotonicity_violations,
        weighted: sandwich(ErrorWeighting::Weighted),
        unweighted: sandwich(ErrorWeighting::Unweighted),
        domain_exits,
        domain_occupancy: occupancy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub samples: usize,
    pub edot_residual: f64,
    pub pedot_residual: f64,
    pub potential_rate_residual: f64,
    /// `None` when no sample lies in the domain.
    pub trace_sandwich_margin: Option<f64>,
    pub lyapunov: LyapunovCheck,
    /// Weighting whose sandwich holds, weighted first.
    pub passing_weighting: Option<ErrorWeighting>,
}

/// Runs every check on a closed-loop log.
pub fn identity_report(log: &RunLog) -> Result<IdentityReport, DiagnosticsError> {
    let cfg = &log.config;
    let samples = reconstruct(log)?;
    let gains = &cfg.gains;
    let domain = cfg.domain()?;
    let vehicle = cfg.vehicle.build()?;
    let mass = vehicle.model().mass_matrix(&GeneralizedCoord::identity());
    let (c1, c2) = (cfg.adaptation.gains.cp, cfg.adaptation.gains.cv);
    let lyapunov = check_lyapunov(&samples, gains, c1, c2, &mass, &domain)?;
    let passing_weighting = if lyapunov.weighted.holds() {
        Some(ErrorWeighting::Weighted)
    } else if lyapunov.unweighted.holds() {
        Some(ErrorWeighting::Unweighted)
    } else {
        None
    };
    Ok(IdentityReport {
        samples: samples.len(),
        edot_residual: check_edot(&samples, gains)?,
        pedot_residual: check_pedot(&samples, gains)?,
        potential_rate_residual: check_potential_rate(&samples, gains)?,
        trace_sandwich_margin: trace_sandwich_margin(&samples, domain.alpha),
        lyapunov,
        passing_weighting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_tracking, ExperimentConfig};

    fn matched(dt: f64, extra: &str) -> RunLog {
        let text = format!(
            "vehicle.kind = rigid_body\n\
             vehicle.mass = 1\n\
             vehicle.inertia = 1,1,1\n\
             controller.attitude = reference\n\
             controller.kp = 5.4\ncontroller.kr = 5.4\ncontroller.kv = 6.3\ncontroller.kw = 6.3\n\
             adaptation.law = energy_consistent\n\
             adaptation.features = wind\n\
             adaptation.cp = 0.5\nadaptation.cr = 0.5\nadaptation.cv = 5.4\nadaptation.cw = 5.4\n\
             trajectory.kind = hover\n\
             disturbance.wind = 0.3,-0.2,0\n\
             sim.dt = {dt}\nsim.log_every = 1\n"
        );
        let mut cfg = ExperimentConfig::parse(&text).unwrap();
        for line in extra.lines() {
            let (k, v) = line.split_once('=').unwrap();
            cfg.set(k.trim(), v).unwrap();
        }
        run_tracking(&cfg).unwrap()
    }

    #[test]
    fn equilibrium_has_zero_residuals() {
        let log = matched(1e-3, "sim.horizon = 0.05\ndisturbance.wind = 0,0,0\n");
        let samples = reconstruct(&log).unwrap();
        let g = &log.config.gains;
        assert!(check_edot(&samples, g).unwrap() <= 1e-10);
        assert!(check_pedot(&samples, g).unwrap() <= 1e-10);
        assert!(check_potential_rate(&samples, g).unwrap() <= 1e-10);
        assert!(samples.iter().all(|s| lyapunov(s, g, 0.5, 5.4).abs() < 1e-15));
    }

    #[test]
    fn residuals_shrink_quadratically() {
        let extra = "sim.horizon = 0.5\ninitial.position_offset = 0.3,-0.1,0.2\ninitial.rotation_vector = 0.2,0.1,-0.3\n";
        let coarse = reconstruct(&matched(2e-3, extra)).unwrap();
        let fine = reconstruct(&matched(1e-3, extra)).unwrap();
        let g = ControllerGains::new(5.4, 5.4, 6.3, 6.3).unwrap();
        for check in [check_edot, check_pedot, check_potential_rate] {
            let ratio = check(&coarse, &g).unwrap() / check(&fine, &g).unwrap();
            assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn report_round_trips_through_csv() {
        let log = matched(1e-3, "sim.horizon = 0.2\ninitial.position_offset = 0.1,0,0\n");
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let back = RunLog::read(csv.as_slice(), &log.sidecar()).unwrap();
        assert_eq!(identity_report(&back).unwrap(), identity_report(&log).unwrap());
    }

    #[test]
    fn short_log_is_rejected() {
        let log = matched(1e-3, "sim.horizon = 0.001\n");
        let samples = reconstruct(&log).unwrap();
        assert!(matches!(check_edot(&samples, &log.config.gains), Err(DiagnosticsError::TooShort(2))));
    }
}
