//! Fitting shared dynamics parameters, disturbance features and per-environment
//! weights to short trajectories by minimizing an SE(3) rollout loss.
//!
//! Gradients come from reverse-mode differentiation of the unrolled RK4 steps
//! (see [`crate::autodiff`]). Samples are evaluated in parallel and reduced in
//! dataset order, so results do not depend on the thread count.

use crate::autodiff::{Tape, Var};
use crate::disturbance::{DisturbanceFeatures, DisturbanceRealization, StructuredFeatures};
use crate::dynamics::{integrate_step, ControlInput, DynamicsError, HamiltonianModel, HamiltonianState, Wrench};
use crate::geometry::{so3_log, GeneralizedCoord, Reprojection, RotationMatrix};
use crate::linalg::norm_squared;
use crate::real::Real;
use crate::vehicle::{QuadrotorModel, VehicleError, DEFAULT_MASS, GRAVITY};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SVector, Vector3, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::ops::Range;
use thiserror::Error;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Training stops with [`LearningError::DivergedLoss`] past this multiple of
/// the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;
/// Rotation validity tolerance for dataset states.
pub const DATASET_ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has length {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss diverged at iteration {iteration}: {loss:e} (initial {initial:e})")]
    DivergedLoss { iteration: usize, loss: f64, initial: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One trajectory under constant input: `N + 1` timestamps and states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub env_id: usize,
    pub t: Vec<f64>,
    pub q: Vec<[f64; 12]>,
    pub zeta: Vec<[f64; 6]>,
    pub u: [f64; 4],
}

impl TrajectorySample {
    pub fn steps(&self) -> usize {
        self.t.len().saturating_sub(1)
    }

    pub fn coord(&self, n: usize) -> GeneralizedCoord<f64> {
        GeneralizedCoord::from_vector(SVector::from(self.q[n]))
    }

    pub fn velocity(&self, n: usize) -> Vector6<f64> {
        Vector6::from(self.zeta[n])
    }

    fn validate(&self, index: usize) -> Result<(), LearningError> {
        let bad = |msg: String| Err(LearningError::InvalidDataset(format!("sample {index}: {msg}")));
        if self.t.len() < 2 {
            return bad("needs at least two timestamps".into());
        }
        if self.q.len() != self.t.len() || self.zeta.len() != self.t.len() {
            return bad(format!(
                "{} timestamps but {} coordinates and {} velocities",
                self.t.len(),
                self.q.len(),
                self.zeta.len()
            ));
        }
        if self.t.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("timestamps must be strictly increasing".into());
        }
        let finite = self.t.iter().chain(self.u.iter()).all(|x| x.is_finite())
            && self.q.iter().flatten().chain(self.zeta.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return bad("non-finite entry".into());
        }
        for n in 0..self.q.len() {
            let r = self.coord(n).rotation();
            let defect = (r.transpose() * r - Matrix3::identity()).norm();
            if defect > DATASET_ROTATION_TOL || (r.determinant() - 1.0).abs() > DATASET_ROTATION_TOL {
                return bad(format!("state {n} is not a rotation (defect {defect:e})"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub samples: Vec<TrajectorySample>,
}

impl TrajectoryDataset {
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self, LearningError> {
        let d = TrajectoryDataset { samples };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), LearningError> {
        if self.samples.is_empty() {
            return Err(LearningError::InvalidDataset("no samples".into()));
        }
        self.samples.iter().enumerate().try_for_each(|(i, s)| s.validate(i))
    }

    /// Number of environments, `1 + max env_id`.
    pub fn environments(&self) -> usize {
        self.samples.iter().map(|s| s.env_id + 1).max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LearningError> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, LearningError> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: TrajectorySample = serde_json::from_str(&line)
                .map_err(|e| LearningError::InvalidDataset(format!("line {}: {e}", i + 1)))?;
            samples.push(s);
        }
        Self::new(samples)
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Feature map family being learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureModel {
    /// Fixed structured columns, nothing to learn.
    Structured { features: StructuredFeatures },
    /// `W = reshape(w2 tanh(w1 [q; p] + b1) + b2)`, six rows by `p` columns
    /// (column-major). `w1` and `w2` are stored row-major.
    Network {
        p: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: Vec<f64>,
    },
}

pub const NETWORK_INPUTS: usize = 18;

impl FeatureModel {
    pub fn network(p: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w1 = uniform(hidden * NETWORK_INPUTS, NETWORK_INPUTS);
        let b1 = uniform(hidden, NETWORK_INPUTS);
        let w2 = uniform(6 * p * hidden, hidden);
        let b2 = uniform(6 * p, hidden);
        FeatureModel::Network { p, hidden, w1, b1, w2, b2 }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureModel::Structured { features } => features.columns().len(),
            FeatureModel::Network { p, .. } => *p,
        }
    }

    fn parameter_count(&self) -> usize {
        match self {
            FeatureModel::Structured { .. } => 0,
            FeatureModel::Network { w1, b1, w2, b2, .. } => w1.len() + b1.len() + w2.len() + b2.len(),
        }
    }
}

/// Features evaluated at a given scalar type.
pub enum LearnedFeatures<T: Real> {
    Structured(StructuredFeatures),
    Network {
        p: usize,
        w1: DMatrix<T>,
        b1: DVector<T>,
        w2: DMatrix<T>,
        b2: DVector<T>,
    },
}

impl<T: Real> DisturbanceFeatures<T> for LearnedFeatures<T> {
    fn dim(&self) -> usize {
        match self {
            LearnedFeatures::Structured(s) => DisturbanceFeatures::<T>::dim(s),
            LearnedFeatures::Network { p, .. } => *p,
        }
    }

    fn features(&self, q: &GeneralizedCoord<T>, mom: &Vector6<T>) -> DMatrix<T> {
        match self {
            LearnedFeatures::Structured(s) => s.features(q, mom),
            LearnedFeatures::Network { p, w1, b1, w2, b2 } => {
                let input = DVector::from_iterator(
                    NETWORK_INPUTS,
                    q.as_vector().iter().chain(mom.iter()).copied(),
                );
                let hidden = (w1 * input + b1).map(|x| x.tanh());
                let out = w2 * hidden + b2;
                DMatrix::from_column_slice(6, *p, out.as_slice())
            }
        }
    }
}

/// Quadrotor with learned inertia and gain entries and known mass.
///
/// `J = L L^T` with `L_jj = softplus(raw_j)` and `L_ij = l_ij L_jj` below the
/// diagonal, so the off-diagonal parameters are scale free.
#[derive(Debug, Clone)]
pub struct LearnedDynamics<T: Real> {
    pub mass: T,
    pub gravity: T,
    pub cholesky: Matrix3<T>,
    pub gain: Vector4<T>,
    inertia_inverse: Matrix3<T>,
}

impl<T: Real> LearnedDynamics<T> {
    pub fn new(mass: T, gravity: T, raw_inertia: &[T], gain: Vector4<T>) -> Self {
        let d = [softplus(raw_inertia[0]), softplus(raw_inertia[1]), softplus(raw_inertia[2])];
        let z = T::zero();
        let l = Matrix3::new(
            d[0],
            z,
            z,
            raw_inertia[3] * d[0],
            d[1],
            z,
            raw_inertia[4] * d[0],
            raw_inertia[5] * d[1],
            d[2],
        );
        let mut li = Matrix3::zeros();
        li[(0, 0)] = T::one() / l[(0, 0)];
        li[(1, 1)] = T::one() / l[(1, 1)];
        li[(2, 2)] = T::one() / l[(2, 2)];
        li[(1, 0)] = -l[(1, 0)] * li[(0, 0)] / l[(1, 1)];
        li[(2, 1)] = -l[(2, 1)] * li[(1, 1)] / l[(2, 2)];
        li[(2, 0)] = -(l[(2, 0)] * li[(0, 0)] + l[(2, 1)] * li[(1, 0)]) / l[(2, 2)];
        LearnedDynamics {
            mass,
            gravity,
            cholesky: l,
            gain,
            inertia_inverse: li.transpose() * li,
        }
    }

    pub fn inertia(&self) -> Matrix3<T> {
        self.cholesky * self.cholesky.transpose()
    }
}

impl<T: Real> HamiltonianModel<T> for LearnedDynamics<T> {
    fn mass_matrix(&self, _q: &GeneralizedCoord<T>) -> Matrix6<T> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * self.mass));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.inertia());
        m
    }

    fn mass_inverse_hint(&self, _q: &GeneralizedCoord<T>) -> Option<Matrix6<T>> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(Matrix3::identity() * (T::one() / self.mass)));
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.inertia_inverse);
        Some(m)
    }

    fn potential(&self, q: &GeneralizedCoord<T>) -> T {
        self.mass * self.gravity * q.position().z
    }

    fn potential_gradient(&self, _q: &GeneralizedCoord<T>) -> SVector<T, 12> {
        let mut g = SVector::zeros();
        g[2] = self.mass * self.gravity;
        g
    }

    fn input_gain(&self, _q: &GeneralizedCoord<T>) -> DMatrix<T> {
        let mut g = DMatrix::zeros(6, 4);
        for k in 0..4 {
            g[(2 + k, k)] = self.gain[k];
        }
        g
    }

    fn input_dim(&self) -> usize {
        4
    }

    fn is_coordinate_independent(&self) -> bool {
        true
    }
}

/// Shared parameters `theta`, feature parameters `phi` and one weight vector
/// per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnableModel {
    pub mass: f64,
    pub gravity: f64,
    /// `[raw_1, raw_2, raw_3, l_21, l_31, l_32]`.
    pub inertia_cholesky: [f64; 6],
    pub input_gain: [f64; 4],
    pub features: FeatureModel,
    pub weights: Vec<Vec<f64>>,
}

/// Index ranges of each parameter group in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub inertia: Range<usize>,
    pub gain: Range<usize>,
    pub features: Range<usize>,
    pub weights: Vec<Range<usize>>,
}

impl ParameterLayout {
    pub fn len(&self) -> usize {
        self.weights.last().map_or(self.features.end, |r| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LearnableModel {
    /// Model with the given inertia diagonal, unit gains and zero weights.
    pub fn new(inertia_diag: [f64; 3], features: FeatureModel, environments: usize) -> Result<Self, LearningError> {
        if inertia_diag.iter().any(|&j| !(j > 0.0) || !j.is_finite()) {
            return Err(LearningError::InvalidConfig(format!(
                "inertia diagonal must be positive, got {inertia_diag:?}"
            )));
        }
        let mut raw = [0.0; 6];
        for k in 0..3 {
            raw[k] = softplus_inverse(inertia_diag[k].sqrt());
        }
        let p = features.dim();
        Ok(LearnableModel {
            mass: DEFAULT_MASS,
            gravity: GRAVITY,
            inertia_cholesky: raw,
            input_gain: [1.0; 4],
            features,
            weights: vec![vec![0.0; p]; environments],
        })
    }

    /// Ground-truth parameters of `truth` with wind weights from the
    /// realizations; requires structured features.
    pub fn from_truth(
        truth: &QuadrotorModel<f64>,
        features: StructuredFeatures,
        realizations: &[DisturbanceRealization],
    ) -> Result<Self, LearningError> {
        let l = crate::linalg::cholesky(&truth.inertia, 0.0)
            .ok_or_else(|| LearningError::InvalidConfig("inertia is not positive definite".into()))?;
        let raw = [
            softplus_inverse(l[(0, 0)]),
            softplus_inverse(l[(1, 1)]),
            softplus_inverse(l[(2, 2)]),
            l[(1, 0)] / l[(0, 0)],
            l[(2, 0)] / l[(0, 0)],
            l[(2, 1)] / l[(1, 1)],
        ];
        let weights = realizations
            .iter()
            .map(|r| r.wind_weights(&features).iter().copied().collect())
            .collect();
        Ok(LearnableModel {
            mass: truth.mass,
            gravity: truth.gravity,
            inertia_cholesky: raw,
            input_gain: truth.gain_scale.into(),
            features: FeatureModel::Structured { features },
            weights,
        })
    }

    pub fn layout(&self) -> ParameterLayout {
        let feat_end = 10 + self.features.parameter_count();
        let p = self.features.dim();
        ParameterLayout {
            inertia: 0..6,
            gain: 6..10,
            features: 10..feat_end,
            weights: (0..self.weights.len())
                .map(|j| feat_end + j * p..feat_end + (j + 1) * p)
                .collect(),
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.layout().len());
        v.extend_from_slice(&self.inertia_cholesky);
        v.extend_from_slice(&self.input_gain);
        if let FeatureModel::Network { w1, b1, w2, b2, .. } = &self.features {
            for part in [w1, b1, w2, b2] {
                v.extend_from_slice(part);
            }
        }
        for a in &self.weights {
            v.extend_from_slice(a);
        }
        v
    }

    pub fn set_parameters(&mut self, theta: &[f64]) -> Result<(), LearningError> {
        let layout = self.layout();
        if theta.len() != layout.len() {
            return Err(LearningError::DimensionMismatch {
                expected: layout.len(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(LearningError::InvalidConfig("parameters must be finite".into()));
        }
        self.inertia_cholesky.copy_from_slice(&theta[layout.inertia]);
        self.input_gain.copy_from_slice(&theta[layout.gain]);
        if let FeatureModel::Network { w1, b1, w2, b2, .. } = &mut self.features {
            let mut at = layout.features.start;
            for part in [w1, b1, w2, b2] {
                let n = part.len();
                part.copy_from_slice(&theta[at..at + n]);
                at += n;
            }
        }
        for (a, r) in self.weights.iter_mut().zip(layout.weights) {
            a.copy_from_slice(&theta[r]);
        }
        Ok(())
    }

    /// Learned inertia `J = L L^T`.
    pub fn inertia(&self) -> Matrix3<f64> {
        self.dynamics_at(&self.parameters()).inertia()
    }

    fn dynamics_at<T: Real>(&self, theta: &[T]) -> LearnedDynamics<T> {
        LearnedDynamics::new(
            T::lit(self.mass),
            T::lit(self.gravity),
            &theta[0..6],
            Vector4::new(theta[6], theta[7], theta[8], theta[9]),
        )
    }

    fn features_at<T: Real>(&self, theta: &[T]) -> LearnedFeatures<T> {
        match &self.features {
            FeatureModel::Structured { features } => LearnedFeatures::Structured(features.clone()),
            FeatureModel::Network { p, hidden, .. } => {
                let (p, h) = (*p, *hidden);
                let mut at = 10;
                let mut take = |n: usize| {
                    let s = &theta[at..at + n];
                    at += n;
                    s
                };
                let w1 = DMatrix::from_row_slice(h, NETWORK_INPUTS, take(h * NETWORK_INPUTS));
                let b1 = DVector::from_column_slice(take(h));
                let w2 = DMatrix::from_row_slice(6 * p, h, take(6 * p * h));
                let b2 = DVector::from_column_slice(take(6 * p));
                LearnedFeatures::Network { p, w1, b1, w2, b2 }
            }
        }
    }

    fn check_dataset(&self, data: &TrajectoryDataset) -> Result<(), LearningError> {
        if data.environments() > self.weights.len() {
            return Err(LearningError::InvalidDataset(format!(
                "dataset has {} environments, model has weights for {}",
                data.environments(),
                self.weights.len()
            )));
        }
        Ok(())
    }
}

/// `|p - p_bar|^2 + |log(R_bar R^T)|^2 + |zeta - zeta_bar|^2`.
pub fn se3_loss<T: Real>(
    q: &GeneralizedCoord<T>,
    zeta: &Vector6<T>,
    q_bar: &GeneralizedCoord<T>,
    zeta_bar: &Vector6<T>,
) -> T {
    let dp = q.position() - q_bar.position();
    let rel = RotationMatrix::from_matrix_unchecked(q_bar.rotation() * q.rotation().transpose());
    let w: Vector3<T> = so3_log(&rel);
    norm_squared(&dp) + norm_squared(&w) + norm_squared(&(zeta - zeta_bar))
}

/// Loss of one sample under parameters `theta`, `substeps` RK4 steps per
/// sample interval.
fn sample_loss<T: Real>(
    model: &LearnableModel,
    theta: &[T],
    sample: &TrajectorySample,
    substeps: usize,
) -> Result<T, LearningError> {
    let dynamics = model.dynamics_at(theta);
    let features = model.features_at(theta);
    let weights = DVector::from_column_slice(&theta[model.layout().weights[sample.env_id].clone()]);
    let lit_coord = |n: usize| GeneralizedCoord::from_vector(SVector::<T, 12>::from(sample.q[n].map(T::lit)));
    let lit_zeta = |n: usize| Vector6::<T>::from(sample.zeta[n].map(T::lit));
    let u = ControlInput::from_slice(&sample.u.map(T::lit));
    let disturbance = |x: &HamiltonianState<T>| -> Wrench<T> {
        let d = features.features(&x.q, &x.p) * &weights;
        Vector6::from_iterator(d.iter().copied())
    };
    let mut x = HamiltonianState::from_velocity(lit_coord(0), &lit_zeta(0), T::lit(sample.t[0]), &dynamics);
    let mut loss = T::zero();
    for n in 1..sample.t.len() {
        let h = T::lit((sample.t[n] - sample.t[n - 1]) / substeps as f64);
        for _ in 0..substeps {
            x = integrate_step(&x, &u, disturbance, &dynamics, h, Reprojection::Newton)?;
        }
        let zeta = crate::dynamics::velocity(&x, &dynamics)?;
        loss += se3_loss(&lit_coord(n), &lit_zeta(n), &x.q, &zeta);
    }
    Ok(loss)
}

/// Sum of per-sample losses over the dataset.
pub fn rollout_loss(model: &LearnableModel, data: &TrajectoryDataset, substeps: usize) -> Result<f64, LearningError> {
    model.check_dataset(data)?;
    let theta = model.parameters();
    let losses: Vec<Result<f64, LearningError>> = data
        .samples
        .par_iter()
        .map(|s| sample_loss(model, &theta, s, substeps))
        .collect();
    losses.into_iter().sum()
}

/// Rollout loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    model: &LearnableModel,
    data: &TrajectoryDataset,
    substeps: usize,
) -> Result<(f64, Vec<f64>), LearningError> {
    model.check_dataset(data)?;
    let theta = model.parameters();
    let parts: Vec<Result<(f64, Vec<f64>), LearningError>> = data
        .samples
        .par_iter()
        .map(|s| {
            Tape::session(|| {
                let leaves: Vec<Var> = theta.iter().map(|&x| Var::leaf(x)).collect();
                let loss = sample_loss(model, &leaves, s, substeps)?;
                Ok((loss.val(), Tape::gradient(loss, &leaves)))
            })
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for part in parts {
        let (l, g) = part?;
        total += l;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi;
        }
    }
    Ok((total, grad))
}

pub fn gradient(model: &LearnableModel, data: &TrajectoryDataset, substeps: usize) -> Result<Vec<f64>, LearningError> {
    loss_and_gradient(model, data, substeps).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    pub substeps: usize,
    pub freeze_inertia: bool,
    pub freeze_gain: bool,
    pub freeze_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            iters: 2000,
            seed: 0,
            substeps: 1,
            freeze_inertia: false,
            freeze_gain: false,
            freeze_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(LearningError::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.substeps == 0 {
            return Err(LearningError::InvalidConfig("substeps must be at least 1".into()));
        }
        Ok(())
    }

    fn trainable_mask(&self, layout: &ParameterLayout) -> Vec<bool> {
        let mut mask = vec![true; layout.len()];
        let frozen = [
            (self.freeze_inertia, layout.inertia.clone()),
            (self.freeze_gain, layout.gain.clone()),
            (self.freeze_features, layout.features.clone()),
        ];
        for (on, range) in frozen {
            if on {
                mask[range].iter_mut().for_each(|m| *m = false);
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: LearnableModel,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Loss before each update.
    pub history: Vec<f64>,
}

/// Adam on the rollout loss; returns the iterate with the lowest loss seen.
pub fn train(model: &LearnableModel, data: &TrajectoryDataset, cfg: &TrainConfig) -> Result<TrainOutcome, LearningError> {
    cfg.validate()?;
    let layout = model.layout();
    let mask = cfg.trainable_mask(&layout);
    let mut current = model.clone();
    let mut theta = model.parameters();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut history = Vec::with_capacity(cfg.iters);
    let mut best = (f64::INFINITY, 0usize, theta.clone());
    let mut initial = f64::NAN;
    for it in 0..=cfg.iters {
        let (loss, grad) = if it < cfg.iters {
            loss_and_gradient(&current, data, cfg.substeps)?
        } else {
            (rollout_loss(&current, data, cfg.substeps)?, Vec::new())
        };
        if it == 0 {
            initial = loss;
        }
        if !loss.is_finite() || loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(LearningError::DivergedLoss {
                iteration: it,
                loss,
                initial,
            });
        }
        if loss < best.0 {
            best = (loss, it, theta.clone());
        }
        if it == cfg.iters {
            break;
        }
        history.push(loss);
        let step = (it + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(step);
        let c2 = 1.0 - ADAM_BETA2.powi(step);
        for k in 0..theta.len() {
            if !mask[k] {
                continue;
            }
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * grad[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * grad[k] * grad[k];
            theta[k] -= cfg.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
        current.set_parameters(&theta)?;
    }
    let mut out = model.clone();
    out.set_parameters(&best.2)?;
    Ok(TrainOutcome {
        model: out,
        initial_loss: initial,
        best_loss: best.0,
        best_iteration: best.1,
        history,
    })
}

/// Trained model file: named parameter arrays plus the producing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: TrainConfig,
    pub model: LearnableModel,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub environments: usize,
    pub samples_per_env: usize,
    pub steps: usize,
    pub dt: f64,
    pub substeps: usize,
    pub seed: u64,
    pub max_tilt: f64,
    pub max_speed: f64,
    pub max_rate: f64,
    /// Relative spread of the thrust around hover.
    pub thrust_spread: f64,
    pub max_torque: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            environments: crate::disturbance::DATASET_REALIZATIONS,
            samples_per_env: 40,
            steps: 5,
            dt: 0.01,
            substeps: 1,
            seed: 0,
            max_tilt: 0.2,
            max_speed: 0.5,
            max_rate: 1.0,
            thrust_spread: 0.2,
            max_torque: 1e-5,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if self.environments == 0 || self.samples_per_env == 0 || self.steps == 0 || self.substeps == 0 {
            return Err(LearningError::InvalidConfig(
                "environments, samples, steps and substeps must be positive".into(),
            ));
        }
        if !(self.dt > 0.0) || self.dt / self.substeps as f64 > crate::dynamics::MAX_STEP {
            return Err(LearningError::InvalidConfig(format!("invalid sample interval {}", self.dt)));
        }
        Ok(())
    }
}

fn symmetric(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.random_range(-bound..=bound)
    } else {
        0.0
    }
}

fn random_vec3(rng: &mut ChaCha8Rng, bound: f64) -> Vector3<f64> {
    Vector3::new(symmetric(rng, bound), symmetric(rng, bound), symmetric(rng, bound))
}

fn generate_sample(
    truth: &QuadrotorModel<f64>,
    realization: &DisturbanceRealization,
    env_id: usize,
    cfg: &DatasetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectorySample, LearningError> {
    let p0 = random_vec3(rng, 1.0);
    let r0 = crate::geometry::so3_exp(&random_vec3(rng, cfg.max_tilt)).into_inner();
    let zeta0 = Vector6::from_iterator(
        random_vec3(rng, cfg.max_speed)
            .iter()
            .chain(random_vec3(rng, cfg.max_rate).iter())
            .copied(),
    );
    let thrust = truth.hover_thrust() * (1.0 + symmetric(rng, cfg.thrust_spread));
    let tau = random_vec3(rng, cfg.max_torque);
    let u_cmd = ControlInput::from_slice(&[thrust, tau.x, tau.y, tau.z]);
    let rotors = truth.rotor_config().with_efficiencies(realization.efficiencies)?;
    let (u_applied, _) = rotors.mixer_saturating(&u_cmd)?;
    let wind = |x: &HamiltonianState<f64>| realization.wind_wrench(&x.q);

    let mut x = HamiltonianState::from_velocity(GeneralizedCoord::from_pose(&p0, &r0), &zeta0, 0.0, truth);
    let h = cfg.dt / cfg.substeps as f64;
    let mut sample = TrajectorySample {
        env_id,
        t: vec![0.0],
        q: vec![(*x.q.as_vector()).into()],
        zeta: vec![zeta0.into()],
        u: [thrust, tau.x, tau.y, tau.z],
    };
    for n in 1..=cfg.steps {
        for _ in 0..cfg.substeps {
            x = integrate_step(&x, &u_applied, wind, truth, h, Reprojection::Eigen)?;
        }
        sample.t.push(n as f64 * cfg.dt);
        sample.q.push((*x.q.as_vector()).into());
        sample.zeta.push(crate::dynamics::velocity(&x, truth)?.into());
    }
    Ok(sample)
}

/// Simulates the true vehicle under each realization from random states near
/// hover with constant, randomly perturbed hover inputs.
pub fn generate_dataset(
    truth: &QuadrotorModel<f64>,
    realizations: &[DisturbanceRealization],
    cfg: &DatasetConfig,
) -> Result<TrajectoryDataset, LearningError> {
    cfg.validate()?;
    if realizations.len() < cfg.environments {
        return Err(LearningError::InvalidConfig(format!(
            "{} environments requested but only {} realizations given",
            cfg.environments,
            realizations.len()
        )));
    }
    let per_env: Vec<Result<Vec<TrajectorySample>, LearningError>> = (0..cfg.environments)
        .into_par_iter()
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(j as u64);
            (0..cfg.samples_per_env)
                .map(|_| generate_sample(truth, &realizations[j], j, cfg, &mut rng))
                .collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(cfg.environments * cfg.samples_per_env);
    for env in per_env {
        samples.extend(env?);
    }
    TrajectoryDataset::new(samples)
}
