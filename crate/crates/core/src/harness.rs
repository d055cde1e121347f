//! Experiment configuration, the closed-loop and open-loop runners, and the
//! CSV/JSON run logs.
//!
//! Configuration files are flat `key = value` lines with dotted sections,
//! for example `trajectory.kind = spiral`. `#` starts a comment. Vectors are
//! comma separated.

use crate::adaptation::{AdaptationError, AdaptationGains, AdaptationLaw, ClosedLoop, WeightEstimate};
use crate::certifier::DomainConstants;
use crate::controller::{AttitudeMode, ControlOutput, ControllerGains};
use crate::disturbance::{DisturbanceFeatures, DisturbanceRealization, StructuredFeatures};
use crate::dynamics::{self, integrate_step, ControlInput, DynamicsError, HamiltonianModel, HamiltonianState};
use crate::geometry::{so3_exp, GeneralizedCoord, Reprojection};
use crate::trajectory::{Heading, ReferenceTrajectory};
use crate::vehicle::{self, QuadrotorModel, RigidBodyModel, RotorConfig};
use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config key {key}: {message}")]
    InvalidValue { key: String, message: String },
    #[error("unknown config key {0}")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("malformed run log: {0}")]
    MalformedLog(String),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// True for configuration and usage problems, false for numerical or I/O
    /// failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            HarnessError::Syntax { .. } | HarnessError::InvalidValue { .. } | HarnessError::UnknownKey(_) | HarnessError::Invalid(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    Quadrotor,
    RigidBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleConfig {
    pub kind: VehicleKind,
    pub mass: f64,
    pub inertia: [f64; 3],
    pub gravity: f64,
    pub arm_length: f64,
    pub torque_coeff: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        VehicleConfig {
            kind: VehicleKind::Quadrotor,
            mass: vehicle::DEFAULT_MASS,
            inertia: vehicle::DEFAULT_INERTIA_DIAG,
            gravity: vehicle::GRAVITY,
            arm_length: vehicle::DEFAULT_ARM_LENGTH,
            torque_coeff: vehicle::DEFAULT_TORQUE_COEFF,
        }
    }
}

/// A vehicle model behind a trait object plus its actuator.
pub enum Vehicle {
    Quadrotor(QuadrotorModel<f64>),
    RigidBody(RigidBodyModel<f64>),
}

impl Vehicle {
    pub fn model(&self) -> &dyn HamiltonianModel<f64> {
        match self {
            Vehicle::Quadrotor(m) => m,
            Vehicle::RigidBody(m) => m,
        }
    }

    pub fn hover_input(&self) -> Vec<f64> {
        match self {
            Vehicle::Quadrotor(m) => vec![m.hover_thrust(), 0.0, 0.0, 0.0],
            Vehicle::RigidBody(m) => vec![0.0, 0.0, m.mass * m.gravity, 0.0, 0.0, 0.0],
        }
    }
}

impl VehicleConfig {
    pub fn build(&self) -> Result<Vehicle, HarnessError> {
        let inertia = Matrix3::from_diagonal(&Vector3::from(self.inertia));
        let invalid = |e: vehicle::VehicleError| HarnessError::Invalid(e.to_string());
        if !(self.gravity >= 0.0) {
            return Err(HarnessError::Invalid(format!("gravity must be non-negative, got {}", self.gravity)));
        }
        Ok(match self.kind {
            VehicleKind::Quadrotor => {
                let mut m = QuadrotorModel::new(self.mass, inertia, self.arm_length, self.torque_coeff).map_err(invalid)?;
                m.gravity = self.gravity;
                Vehicle::Quadrotor(m)
            }
            VehicleKind::RigidBody => {
                Vehicle::RigidBody(RigidBodyModel::try_new(self.mass, inertia, self.gravity).map_err(invalid)?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub enabled: bool,
    pub gains: AdaptationGains,
    pub law: AdaptationLaw,
    pub features: String,
    pub norm_cap: Option<f64>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            enabled: true,
            gains: AdaptationGains::quadrotor(),
            law: AdaptationLaw::PerChannel,
            features: "full".into(),
            norm_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub kind: String,
    pub radius: f64,
    pub rate: f64,
    pub climb: f64,
    pub position: [f64; 3],
    pub psi0: f64,
    pub psi_rate: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            kind: "spiral".into(),
            radius: crate::trajectory::DEFAULT_SPIRAL_RADIUS,
            rate: crate::trajectory::DEFAULT_SPIRAL_RATE,
            climb: crate::trajectory::DEFAULT_SPIRAL_CLIMB,
            position: [0.0; 3],
            psi0: 0.0,
            psi_rate: 0.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn build(&self) -> Result<ReferenceTrajectory, HarnessError> {
        let heading = Heading {
            psi0: self.psi0,
            rate: self.psi_rate,
        };
        match self.kind.as_str() {
            "hover" => Ok(ReferenceTrajectory::Hover {
                position: self.position,
                heading,
            }),
            "spiral" => ReferenceTrajectory::spiral(self.radius, self.rate, self.climb, heading)
                .map_err(|e| HarnessError::Invalid(e.to_string())),
            other => Err(HarnessError::InvalidValue {
                key: "trajectory.kind".into(),
                message: format!("expected hover or spiral, got {other}"),
            }),
        }
    }
}

/// Offsets of the initial state from the reference at `t = 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialConfig {
    pub position_offset: [f64; 3],
    pub rotation_vector: [f64; 3],
    /// World-frame velocity offset.
    pub velocity: [f64; 3],
    /// Body angular velocity offset.
    pub angular_velocity: [f64; 3],
    /// Uniform random position offset bound, drawn from `sim.seed`.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub log_every: usize,
    pub reprojection: Reprojection,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-4,
            horizon: 40.0,
            seed: 0,
            log_every: 100,
            reprojection: Reprojection::Eigen,
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub alpha: f64,
    /// Bound on the initial angular velocity error; taken from the initial
    /// state when absent.
    pub beta: Option<f64>,
    /// Bound on `|w*|`; taken from the trajectory when absent.
    pub gamma: Option<f64>,
    /// `c1/c2` for `certify`; taken from the adaptation gains when absent.
    pub c_ratio: Option<f64>,
    pub synthesize: bool,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            alpha: 1.0,
            beta: None,
            gamma: None,
            c_ratio: None,
            synthesize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub vehicle: VehicleConfig,
    pub gains: ControllerGains,
    pub attitude: AttitudeMode,
    pub adaptation: AdaptationConfig,
    pub trajectory: TrajectoryConfig,
    pub disturbance: DisturbanceRealization,
    pub initial: InitialConfig,
    pub sim: SimConfig,
    pub certify: CertifyConfig,
    /// Constant input of the open-loop `simulate` run; hover when absent.
    pub open_loop_input: Option<Vec<f64>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            vehicle: VehicleConfig::default(),
            gains: ControllerGains::quadrotor(),
            attitude: AttitudeMode::ThrustAligned,
            adaptation: AdaptationConfig::default(),
            trajectory: TrajectoryConfig::default(),
            disturbance: DisturbanceRealization::default(),
            initial: InitialConfig::default(),
            sim: SimConfig::default(),
            certify: CertifyConfig::default(),
            open_loop_input: None,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, HarnessError> {
    v.trim().parse::<f64>().map_err(|_| HarnessError::InvalidValue {
        key: key.into(),
        message: format!("expected a number, got {v:?}"),
    })
}

fn parse_vec(key: &str, v: &str) -> Result<Vec<f64>, HarnessError> {
    v.split(',').map(|s| parse_f64(key, s)).collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[f64; N], HarnessError> {
    let values = parse_vec(key, v)?;
    values.try_into().map_err(|got: Vec<f64>| HarnessError::InvalidValue {
        key: key.into(),
        message: format!("expected {N} comma-separated numbers, got {}", got.len()),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v.trim() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        other => Err(HarnessError::InvalidValue {
            key: key.into(),
            message: format!("expected on/off, got {other:?}"),
        }),
    }
}

fn parse_optional(key: &str, v: &str) -> Result<Option<f64>, HarnessError> {
    match v.trim() {
        "none" | "auto" | "" => Ok(None),
        s => parse_f64(key, s).map(Some),
    }
}

fn parse_choice<T: Copy>(key: &str, v: &str, choices: &[(&str, T)]) -> Result<T, HarnessError> {
    choices
        .iter()
        .find(|(name, _)| *name == v.trim())
        .map(|&(_, c)| c)
        .ok_or_else(|| HarnessError::InvalidValue {
            key: key.into(),
            message: format!(
                "expected one of {}, got {v:?}",
                choices.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>, HarnessError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| HarnessError::Syntax {
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(HarnessError::Syntax {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (line, k, v) in parse_key_values(text)? {
            if let Some(prev) = seen.insert(k.clone(), line) {
                return Err(HarnessError::Syntax {
                    line,
                    message: format!("duplicate key {k} (first on line {prev})"),
                });
            }
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), HarnessError> {
        let f = |v: &str| parse_f64(key, v);
        match key {
            "vehicle.kind" => {
                self.vehicle.kind = parse_choice(key, v, &[("quadrotor", VehicleKind::Quadrotor), ("rigid_body", VehicleKind::RigidBody)])?
            }
            "vehicle.mass" => self.vehicle.mass = f(v)?,
            "vehicle.inertia" => self.vehicle.inertia = parse_array(key, v)?,
            "vehicle.gravity" => self.vehicle.gravity = f(v)?,
            "vehicle.arm_length" => self.vehicle.arm_length = f(v)?,
            "vehicle.torque_coeff" => self.vehicle.torque_coeff = f(v)?,
            "controller.kp" => self.gains.kp = f(v)?,
            "controller.kr" => self.gains.kr = f(v)?,
            "controller.kv" => self.gains.kv = f(v)?,
            "controller.kw" => self.gains.kw = f(v)?,
            "controller.attitude" => {
                self.attitude = parse_choice(key, v, &[("reference", AttitudeMode::Reference), ("thrust_aligned", AttitudeMode::ThrustAligned)])?
            }
            "adaptation.enabled" => self.adaptation.enabled = parse_bool(key, v)?,
            "adaptation.cp" => self.adaptation.gains.cp = f(v)?,
            "adaptation.cr" => self.adaptation.gains.cr = f(v)?,
            "adaptation.cv" => self.adaptation.gains.cv = f(v)?,
            "adaptation.cw" => self.adaptation.gains.cw = f(v)?,
            "adaptation.law" => {
                self.adaptation.law = parse_choice(
                    key,
                    v,
                    &[("per_channel", AdaptationLaw::PerChannel), ("energy_consistent", AdaptationLaw::EnergyConsistent)],
                )?
            }
            "adaptation.features" => self.adaptation.features = v.trim().to_string(),
            "adaptation.norm_cap" => self.adaptation.norm_cap = parse_optional(key, v)?,
            "trajectory.kind" => self.trajectory.kind = v.trim().to_string(),
            "trajectory.radius" => self.trajectory.radius = f(v)?,
            "trajectory.rate" => self.trajectory.rate = f(v)?,
            "trajectory.climb" => self.trajectory.climb = f(v)?,
            "trajectory.position" => self.trajectory.position = parse_array(key, v)?,
            "trajectory.psi0" => self.trajectory.psi0 = f(v)?,
            "trajectory.psi_rate" => self.trajectory.psi_rate = f(v)?,
            "disturbance.wind" => self.disturbance.wind = parse_array(key, v)?,
            "disturbance.efficiencies" => self.disturbance.efficiencies = parse_array(key, v)?,
            "initial.position_offset" => self.initial.position_offset = parse_array(key, v)?,
            "initial.rotation_vector" => self.initial.rotation_vector = parse_array(key, v)?,
            "initial.velocity" => self.initial.velocity = parse_array(key, v)?,
            "initial.angular_velocity" => self.initial.angular_velocity = parse_array(key, v)?,
            "initial.jitter" => self.initial.jitter = f(v)?,
            "sim.dt" => self.sim.dt = f(v)?,
            "sim.horizon" => self.sim.horizon = f(v)?,
            "sim.seed" => {
                self.sim.seed = v.trim().parse().map_err(|_| HarnessError::InvalidValue {
                    key: key.into(),
                    message: format!("expected a non-negative integer, got {v:?}"),
                })?
            }
            "sim.log_every" => {
                self.sim.log_every = v.trim().parse().map_err(|_| HarnessError::InvalidValue {
                    key: key.into(),
                    message: format!("expected a positive integer, got {v:?}"),
                })?
            }
            "sim.reprojection" => {
                self.sim.reprojection = parse_choice(key, v, &[("eigen", Reprojection::Eigen), ("newton", Reprojection::Newton)])?
            }
            "certify.alpha" => self.certify.alpha = f(v)?,
            "certify.beta" => self.certify.beta = parse_optional(key, v)?,
            "certify.gamma" => self.certify.gamma = parse_optional(key, v)?,
            "certify.c_ratio" => self.certify.c_ratio = parse_optional(key, v)?,
            "certify.synthesize" => self.certify.synthesize = parse_bool(key, v)?,
            "open_loop.input" => {
                self.open_loop_input = match v.trim() {
                    "hover" | "" => None,
                    s => Some(parse_vec(key, s)?),
                }
            }
            _ => return Err(HarnessError::UnknownKey(key.into())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |m: String| Err(HarnessError::Invalid(m));
        if !(self.sim.dt > 0.0) || self.sim.dt > dynamics::MAX_STEP {
            return invalid(format!("sim.dt must be in (0, {}], got {}", dynamics::MAX_STEP, self.sim.dt));
        }
        if !(self.sim.horizon > 0.0) || !self.sim.horizon.is_finite() {
            return invalid(format!("sim.horizon must be positive, got {}", self.sim.horizon));
        }
        if self.sim.log_every == 0 {
            return invalid("sim.log_every must be at least 1".into());
        }
        self.gains.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        self.adaptation.gains.validate().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        self.features()?;
        DisturbanceRealization::new(self.disturbance.wind, self.disturbance.efficiencies)
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if self.vehicle.kind == VehicleKind::RigidBody && self.disturbance.has_defective_rotors() {
            return invalid("rotor efficiencies apply to the quadrotor only".into());
        }
        self.vehicle.build()?;
        self.trajectory.build()?;
        Ok(())
    }

    pub fn features(&self) -> Result<StructuredFeatures, HarnessError> {
        StructuredFeatures::by_name(&self.adaptation.features).ok_or_else(|| HarnessError::InvalidValue {
            key: "adaptation.features".into(),
            message: format!("expected full, wind, wind_thrust or a column list, got {:?}", self.adaptation.features),
        })
    }

    /// True disturbance weights under the configured features.
    pub fn true_weights(&self) -> Result<DVector<f64>, HarnessError> {
        Ok(self.disturbance.wind_weights(&self.features()?))
    }

    pub fn domain(&self) -> Result<DomainConstants, HarnessError> {
        let trajectory = self.trajectory.build()?;
        let gamma = match self.certify.gamma {
            Some(g) => g,
            None => trajectory.gamma().map_err(|e| HarnessError::Invalid(e.to_string()))?,
        };
        let beta = match self.certify.beta {
            Some(b) => b,
            None => {
                let vehicle = self.vehicle.build()?;
                let x0 = initial_state(self, &trajectory, vehicle.model())?;
                let r0 = trajectory.sample(0.0).map_err(|e| HarnessError::Invalid(e.to_string()))?;
                let e = crate::controller::tracking_errors(&x0, &r0, &self.gains, vehicle.model())
                    .map_err(|e| HarnessError::Invalid(e.to_string()))?;
                e.e_w.norm().max(BETA_FLOOR)
            }
        };
        DomainConstants::new(self.certify.alpha, beta, gamma).map_err(|e| HarnessError::Invalid(e.to_string()))
    }
}

/// Smallest `beta` taken from the initial state; a start at rest would give zero.
pub const BETA_FLOOR: f64 = 1e-6;

/// Initial state: reference at `t = 0` shifted by the configured offsets.
pub fn initial_state(
    cfg: &ExperimentConfig,
    trajectory: &ReferenceTrajectory,
    model: &dyn HamiltonianModel<f64>,
) -> Result<HamiltonianState<f64>, HarnessError> {
    let r0 = trajectory.sample(0.0).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sim.seed);
    let j = cfg.initial.jitter;
    let jitter = if j > 0.0 {
        Vector3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        Vector3::zeros()
    };
    let p = r0.p + Vector3::from(cfg.initial.position_offset) + jitter;
    let r = so3_exp(&Vector3::from(cfg.initial.rotation_vector)).into_inner() * r0.r;
    let v = r.transpose() * (r0.v + Vector3::from(cfg.initial.velocity));
    let w = r.transpose() * r0.r * r0.w + Vector3::from(cfg.initial.angular_velocity);
    let zeta = Vector6::new(v.x, v.y, v.z, w.x, w.y, w.z);
    Ok(HamiltonianState::from_velocity(GeneralizedCoord::from_pose(&p, &r), &zeta, 0.0, model))
}

/// One logged sample of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub p: [f64; 3],
    pub p_ref: [f64; 3],
    pub r: [f64; 9],
    pub v: [f64; 3],
    pub w: [f64; 3],
    pub u: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub e_p: f64,
    pub e_r: f64,
    pub e_v: f64,
    pub e_w: f64,
    pub p_e: f64,
    pub h: f64,
    pub h_d: f64,
    pub lyapunov: f64,
    pub residual: f64,
}

impl LogRow {
    pub fn coord(&self) -> GeneralizedCoord<f64> {
        GeneralizedCoord::from_pose(&Vector3::from(self.p), &Matrix3::from_row_slice(&self.r))
    }

    pub fn velocity(&self) -> Vector6<f64> {
        Vector6::new(self.v[0], self.v[1], self.v[2], self.w[0], self.w[1], self.w[2])
    }

    pub fn position_error(&self) -> f64 {
        (Vector3::from(self.p) - Vector3::from(self.p_ref)).norm()
    }

    fn values(&self) -> Vec<f64> {
        let mut v = vec![self.t];
        v.extend_from_slice(&self.p);
        v.extend_from_slice(&self.p_ref);
        v.extend_from_slice(&self.r);
        v.extend_from_slice(&self.v);
        v.extend_from_slice(&self.w);
        v.extend_from_slice(&self.u);
        v.extend_from_slice(&self.a_hat);
        v.extend_from_slice(&[
            self.e_p,
            self.e_r,
            self.e_v,
            self.e_w,
            self.p_e,
            self.h,
            self.h_d,
            self.lyapunov,
            self.residual,
        ]);
        v
    }

    fn from_values(v: &[f64], inputs: usize, weights: usize) -> Self {
        let arr3 = |i: usize| [v[i], v[i + 1], v[i + 2]];
        let mut r = [0.0; 9];
        r.copy_from_slice(&v[7..16]);
        let s = 22 + inputs + weights;
        LogRow {
            t: v[0],
            p: arr3(1),
            p_ref: arr3(4),
            r,
            v: arr3(16),
            w: arr3(19),
            u: v[22..22 + inputs].to_vec(),
            a_hat: v[22 + inputs..s].to_vec(),
            e_p: v[s],
            e_r: v[s + 1],
            e_v: v[s + 2],
            e_w: v[s + 3],
            p_e: v[s + 4],
            h: v[s + 5],
            h_d: v[s + 6],
            lyapunov: v[s + 7],
            residual: v[s + 8],
        }
    }
}

pub fn log_columns(inputs: usize, weights: usize) -> Vec<String> {
    let mut c: Vec<String> = ["t", "p_x", "p_y", "p_z", "pref_x", "pref_y", "pref_z"].iter().map(|s| s.to_string()).collect();
    for i in 1..=3 {
        for j in 1..=3 {
            c.push(format!("r{i}{j}"));
        }
    }
    c.extend(["v_x", "v_y", "v_z", "w_x", "w_y", "w_z"].iter().map(|s| s.to_string()));
    c.extend((0..inputs).map(|k| format!("u_{k}")));
    c.extend((0..weights).map(|k| format!("a_hat_{k}")));
    c.extend(
        ["e_p", "e_r", "e_v", "e_w", "p_e", "h", "h_d", "lyapunov", "residual"]
            .iter()
            .map(|s| s.to_string()),
    );
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NumericalFailure { t: f64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rows: usize,
    pub final_position_error: f64,
    pub max_position_error: f64,
    pub rms_position_error: f64,
    /// Largest position error over the last quarter of the run.
    pub steady_state_position_error: f64,
    pub saturated_steps: usize,
    pub final_a_hat: Vec<f64>,
}

/// Closed-loop log: rows plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub inputs: usize,
    pub weights: usize,
    pub rows: Vec<LogRow>,
    pub status: RunStatus,
    pub saturated_steps: usize,
}

/// JSON written next to each CSV log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub columns: Vec<String>,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub summary: RunSummary,
}

impl RunLog {
    pub fn columns(&self) -> Vec<String> {
        log_columns(self.inputs, self.weights)
    }

    pub fn summary(&self) -> RunSummary {
        let errors: Vec<f64> = self.rows.iter().map(LogRow::position_error).collect();
        let n = errors.len().max(1) as f64;
        let t_end = self.rows.last().map_or(0.0, |r| r.t);
        let tail_start = 0.75 * t_end;
        RunSummary {
            rows: self.rows.len(),
            final_position_error: errors.last().copied().unwrap_or(f64::NAN),
            max_position_error: errors.iter().copied().fold(0.0, f64::max),
            rms_position_error: (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            steady_state_position_error: self
                .rows
                .iter()
                .zip(&errors)
                .filter(|(r, _)| r.t >= tail_start)
                .map(|(_, e)| *e)
                .fold(0.0, f64::max),
            saturated_steps: self.saturated_steps,
            final_a_hat: self.rows.last().map_or_else(Vec::new, |r| r.a_hat.clone()),
        }
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            columns: self.columns(),
            config: self.config.clone(),
            status: self.status.clone(),
            summary: self.summary(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.columns())?;
        for row in &self.rows {
            out.write_record(row.values().iter().map(|x| x.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_sidecar<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        serde_json::to_writer_pretty(w, &self.sidecar())?;
        Ok(())
    }

    /// Reads a CSV log back; the sidecar supplies the configuration.
    pub fn read(csv_data: impl Read, sidecar: &Sidecar) -> Result<Self, HarnessError> {
        let mut reader = csv::Reader::from_reader(csv_data);
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let inputs = header.iter().filter(|h| h.starts_with("u_")).count();
        let weights = header.iter().filter(|h| h.starts_with("a_hat_")).count();
        if header != log_columns(inputs, weights) || header != sidecar.columns {
            return Err(HarnessError::MalformedLog("header does not match the log layout".into()));
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let values: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| HarnessError::MalformedLog(format!("row {}: {e}", i + 1)))?;
            if values.len() != header.len() {
                return Err(HarnessError::MalformedLog(format!("row {} has {} fields", i + 1, values.len())));
            }
            rows.push(LogRow::from_values(&values, inputs, weights));
        }
        Ok(RunLog {
            config: sidecar.config.clone(),
            inputs,
            weights,
            rows,
            status: sidecar.status.clone(),
            saturated_steps: sidecar.summary.saturated_steps,
        })
    }
}

/// Lyapunov candidate `H_d + (c1/c2) e^T M^{-1} p_e + |e_a|^2 / (2 c2)`
/// with `c1 = cp`, `c2 = cv`.
pub fn lyapunov_value(
    output: &ControlOutput<f64>,
    a_hat: &DVector<f64>,
    a_star: &DVector<f64>,
    gains: &ControllerGains,
    adaptation: &AdaptationGains,
) -> f64 {
    let e = &output.errors;
    let c1 = adaptation.cp;
    let c2 = adaptation.cv;
    let e_a = a_hat - a_star;
    e.desired_hamiltonian(gains) + c1 / c2 * e.potential_rate() + e_a.norm_squared() / (2.0 * c2)
}

struct Actuator {
    rotors: Option<RotorConfig<f64>>,
    saturated: std::cell::Cell<usize>,
}

impl Actuator {
    fn apply(&self, u: &ControlInput<f64>) -> Result<ControlInput<f64>, AdaptationError> {
        match &self.rotors {
            Some(r) => {
                let (out, clamped) = r.mixer_saturating(u)?;
                if clamped {
                    self.saturated.set(self.saturated.get() + 1);
                }
                Ok(out)
            }
            None => Ok(u.clone()),
        }
    }
}

/// Closed-loop simulation of the configured scenario.
///
/// A numerical failure ends the run early; the rows logged so far are kept
/// and the status records the failure.
pub fn run_tracking(cfg: &ExperimentConfig) -> Result<RunLog, HarnessError> {
    cfg.validate()?;
    let vehicle = cfg.vehicle.build()?;
    let model = vehicle.model();
    let trajectory = cfg.trajectory.build()?;
    let features = cfg.features()?;
    let p = DisturbanceFeatures::<f64>::dim(&features);
    let a_star = cfg.true_weights()?;
    let actuator = Actuator {
        rotors: match &vehicle {
            Vehicle::Quadrotor(m) => Some(
                m.rotor_config()
                    .with_efficiencies(cfg.disturbance.efficiencies)
                    .map_err(|e| HarnessError::Invalid(e.to_string()))?,
            ),
            Vehicle::RigidBody(_) => None,
        },
        saturated: std::cell::Cell::new(0),
    };
    let actuate = |u: &ControlInput<f64>| actuator.apply(u);
    let disturbance = |x: &HamiltonianState<f64>| cfg.disturbance.wind_wrench(&x.q);
    let reference = |t: f64| trajectory.sample(t).map_err(AdaptationError::from);
    let closed = ClosedLoop {
        model,
        plant: model,
        features: &features,
        gains: cfg.gains,
        adaptation: cfg.adaptation.enabled.then_some((cfg.adaptation.gains, cfg.adaptation.law)),
        mode: cfg.attitude,
        actuator: &actuate,
        disturbance: &disturbance,
        reference: &reference,
        reprojection: cfg.sim.reprojection,
        norm_cap: cfg.adaptation.norm_cap,
    };

    let mut x = initial_state(cfg, &trajectory, model)?;
    let mut a = WeightEstimate::zeros(p);
    let steps = cfg.sim.steps();
    let mut rows = Vec::with_capacity(steps / cfg.sim.log_every + 2);
    let make_row = |x: &HamiltonianState<f64>, a: &DVector<f64>, out: &ControlOutput<f64>| -> Result<LogRow, HarnessError> {
        let zeta = dynamics::velocity(x, model)?;
        let e = &out.errors;
        let r = x.q.rotation();
        let mut r_rows = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r_rows[3 * i + j] = r[(i, j)];
            }
        }
        Ok(LogRow {
            t: x.t,
            p: x.q.position().into(),
            p_ref: out.reference.p.into(),
            r: r_rows,
            v: [zeta[0], zeta[1], zeta[2]],
            w: [zeta[3], zeta[4], zeta[5]],
            u: out.u.as_slice().to_vec(),
            a_hat: a.iter().copied().collect(),
            e_p: e.e_p.norm(),
            e_r: e.e_r.norm(),
            e_v: e.e_v.norm(),
            e_w: e.e_w.norm(),
            p_e: e.p_e.norm(),
            h: dynamics::hamiltonian(&x.q, &x.p, model)?,
            h_d: e.desired_hamiltonian(&cfg.gains),
            lyapunov: lyapunov_value(out, a, &a_star, &cfg.gains, &cfg.adaptation.gains),
            residual: out.residual,
        })
    };
    let mut status = RunStatus::Completed;
    for n in 0..=steps {
        let logged = n % cfg.sim.log_every == 0 || n == steps;
        if n == steps {
            match closed.rates(&x, &a.a) {
                Ok(k) => rows.push(make_row(&x, &a.a, &k.output)?),
                Err(e) => status = failure(x.t, e),
            }
            break;
        }
        match closed.step(&x, &a, cfg.sim.dt) {
            Ok((nx, na, k1)) => {
                if logged {
                    rows.push(make_row(&x, &a.a, &k1.output)?);
                }
                x = nx;
                a = na;
            }
            Err(e) => {
                status = failure(x.t, e);
                break;
            }
        }
    }
    let saturated_steps = actuator.saturated.get();
    Ok(RunLog {
        config: cfg.clone(),
        inputs: model.input_dim(),
        weights: p,
        rows,
        status,
        saturated_steps,
    })
}

fn failure(t: f64, e: AdaptationError) -> RunStatus {
    RunStatus::NumericalFailure {
        t,
        message: e.to_string(),
    }
}

/// Open-loop log: state and energy under a constant input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopLog {
    pub input: Vec<f64>,
    pub rows: Vec<[f64; 20]>,
    pub status: RunStatus,
}

pub const OPEN_LOOP_COLUMNS: [&str; 20] = [
    "t", "p_x", "p_y", "p_z", "r11", "r12", "r13", "r21", "r22", "r23", "r31", "r32", "r33", "v_x", "v_y", "v_z", "w_x", "w_y",
    "w_z", "h",
];

impl OpenLoopLog {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), HarnessError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(OPEN_LOOP_COLUMNS)?;
        for row in &self.rows {
            out.write_record(row.iter().map(|x| x.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Integrates the plant with a constant input and the configured wind.
pub fn run_open_loop(cfg: &ExperimentConfig) -> Result<OpenLoopLog, HarnessError> {
    cfg.validate()?;
    let vehicle = cfg.vehicle.build()?;
    let model = vehicle.model();
    let input = cfg.open_loop_input.clone().unwrap_or_else(|| vehicle.hover_input());
    if input.len() != model.input_dim() {
        return Err(HarnessError::InvalidValue {
            key: "open_loop.input".into(),
            message: format!("expected {} values, got {}", model.input_dim(), input.len()),
        });
    }
    let u_cmd = ControlInput::from_slice(&input);
    let u = match &vehicle {
        Vehicle::Quadrotor(m) => {
            let rotors = m
                .rotor_config()
                .with_efficiencies(cfg.disturbance.efficiencies)
                .map_err(|e| HarnessError::Invalid(e.to_string()))?;
            rotors.mixer_saturating(&u_cmd).map_err(|e| HarnessError::Invalid(e.to_string()))?.0
        }
        Vehicle::RigidBody(_) => u_cmd,
    };
    let trajectory = cfg.trajectory.build()?;
    let mut x = initial_state(cfg, &trajectory, model)?;
    let wind = |x: &HamiltonianState<f64>| cfg.disturbance.wind_wrench(&x.q);
    let row = |x: &HamiltonianState<f64>| -> Result<[f64; 20], HarnessError> {
        let zeta = dynamics::velocity(x, model)?;
        let mut r = [0.0; 20];
        r[0] = x.t;
        r[1..13].copy_from_slice(x.q.as_vector().as_slice());
        r[13..19].copy_from_slice(zeta.as_slice());
        r[19] = dynamics::hamiltonian(&x.q, &x.p, model)?;
        Ok(r)
    };
    let steps = cfg.sim.steps();
    let mut rows = vec![row(&x)?];
    let mut status = RunStatus::Completed;
    for n in 1..=steps {
        match integrate_step(&x, &u, wind, model, cfg.sim.dt, cfg.sim.reprojection) {
            Ok(nx) => x = nx,
            Err(e) => {
                status = RunStatus::NumericalFailure {
                    t: x.t,
                    message: e.to_string(),
                };
                break;
            }
        }
        if n % cfg.sim.log_every == 0 || n == steps {
            rows.push(row(&x)?);
        }
    }
    Ok(OpenLoopLog { input, rows, status })
}
