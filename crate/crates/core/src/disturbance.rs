//! Disturbances linear in features, `d = W(q, p) a`, and the concrete wind
//! and rotor-defect realizations used in the experiments.

use crate::dynamics::Wrench;
use crate::geometry::GeneralizedCoord;
use crate::real::Real;
use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DisturbanceError {
    #[error("weights have length {got}, features have {expected} columns")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid disturbance realization: {0}")]
    InvalidRealization(String),
}

/// Feature map `W(q, p)`, six rows by `dim()` columns.
pub trait DisturbanceFeatures<T: Real> {
    fn dim(&self) -> usize;
    fn features(&self, q: &GeneralizedCoord<T>, p: &Vector6<T>) -> DMatrix<T>;
}

/// Selection from the six structured columns
/// `[R^T e1; 0], [R^T e2; 0], [e3; 0], [0; e1], [0; e2], [0; e3]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredFeatures {
    columns: Vec<usize>,
}

impl StructuredFeatures {
    pub fn full() -> Self {
        StructuredFeatures { columns: (0..6).collect() }
    }

    /// The two horizontal wind columns.
    pub fn wind() -> Self {
        StructuredFeatures { columns: vec![0, 1] }
    }

    pub fn subset(columns: Vec<usize>) -> Result<Self, DisturbanceError> {
        if columns.is_empty() || columns.iter().any(|&c| c >= 6) {
            return Err(DisturbanceError::InvalidRealization(format!(
                "feature columns must be a non-empty subset of 0..6, got {columns:?}"
            )));
        }
        Ok(StructuredFeatures { columns })
    }

    /// `full`, `wind`, `wind_thrust` or a comma-separated column list.
    pub fn by_name(name: &str) -> Option<Self> {
        match name.trim() {
            "full" => Some(Self::full()),
            "wind" => Some(Self::wind()),
            "wind_thrust" => Some(StructuredFeatures { columns: vec![0, 1, 2] }),
            list => {
                let columns = list.split(',').map(|c| c.trim().parse().ok()).collect::<Option<Vec<usize>>>()?;
                Self::subset(columns).ok()
            }
        }
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    fn column<T: Real>(k: usize, q: &GeneralizedCoord<T>) -> Vector6<T> {
        let mut c = Vector6::zeros();
        match k {
            // R^T e_i is the i-th row of R.
            0 | 1 => c.fixed_rows_mut::<3>(0).copy_from(&q.row(k)),
            2 => c[2] = T::one(),
            _ => c[k] = T::one(),
        }
        c
    }
}

impl<T: Real> DisturbanceFeatures<T> for StructuredFeatures {
    fn dim(&self) -> usize {
        self.columns.len()
    }

    fn features(&self, q: &GeneralizedCoord<T>, _p: &Vector6<T>) -> DMatrix<T> {
        let mut w = DMatrix::zeros(6, self.columns.len());
        for (j, &k) in self.columns.iter().enumerate() {
            w.set_column(j, &Self::column(k, q));
        }
        w
    }
}

/// `d = W(q, p) a`.
pub fn apply<T: Real, F: DisturbanceFeatures<T> + ?Sized>(
    features: &F,
    weights: &DVector<T>,
    q: &GeneralizedCoord<T>,
    p: &Vector6<T>,
) -> Result<Wrench<T>, DisturbanceError> {
    if weights.len() != features.dim() {
        return Err(DisturbanceError::DimensionMismatch {
            expected: features.dim(),
            got: weights.len(),
        });
    }
    let d = features.features(q, p) * weights;
    Ok(Vector6::from_iterator(d.iter().copied()))
}

/// World-frame horizontal wind force plus rotor efficiencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceRealization {
    pub wind: [f64; 3],
    pub efficiencies: [f64; 4],
}

impl Default for DisturbanceRealization {
    fn default() -> Self {
        DisturbanceRealization {
            wind: [0.0; 3],
            efficiencies: [1.0; 4],
        }
    }
}

impl DisturbanceRealization {
    pub fn new(wind: [f64; 3], efficiencies: [f64; 4]) -> Result<Self, DisturbanceError> {
        if wind[2] != 0.0 || wind.iter().any(|w| !w.is_finite()) {
            return Err(DisturbanceError::InvalidRealization(format!(
                "wind must be finite and horizontal, got {wind:?}"
            )));
        }
        if efficiencies.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(DisturbanceError::InvalidRealization(format!(
                "rotor efficiencies must lie in (0, 1], got {efficiencies:?}"
            )));
        }
        Ok(DisturbanceRealization { wind, efficiencies })
    }

    /// Wind as a body wrench `[R^T d_w; 0]`.
    pub fn wind_wrench<T: Real>(&self, q: &GeneralizedCoord<T>) -> Wrench<T> {
        let dw = Vector3::from(self.wind.map(T::lit));
        let mut w = Vector6::zeros();
        w.fixed_rows_mut::<3>(0).copy_from(&(q.rotation().transpose() * dw));
        w
    }

    /// True weights of the wind part under `features`; columns other than the
    /// two wind columns get zero.
    pub fn wind_weights(&self, features: &StructuredFeatures) -> DVector<f64> {
        DVector::from_iterator(
            features.columns().len(),
            features.columns().iter().map(|&k| if k < 2 { self.wind[k] } else { 0.0 }),
        )
    }

    pub fn has_defective_rotors(&self) -> bool {
        self.efficiencies.iter().any(|&d| d != 1.0)
    }
}

pub const DATASET_WIND_LEVELS: [f64; 4] = [-0.5, -0.25, 0.25, 0.5];
pub const DATASET_EFFICIENCY_RANGE: (f64, f64) = (0.94, 0.98);
pub const DATASET_REALIZATIONS: usize = 8;

/// Eight training realizations: wind components from `{+-0.25, +-0.5}`,
/// rotors 1 and 2 at a uniform efficiency in `[0.94, 0.98]`.
pub fn sample_dataset_realizations(seed: u64) -> Vec<DisturbanceRealization> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..DATASET_REALIZATIONS)
        .map(|_| {
            let wx = DATASET_WIND_LEVELS[rng.random_range(0..4)];
            let wy = DATASET_WIND_LEVELS[rng.random_range(0..4)];
            let (lo, hi) = DATASET_EFFICIENCY_RANGE;
            let d1 = rng.random_range(lo..=hi);
            let d2 = rng.random_range(lo..=hi);
            DisturbanceRealization {
                wind: [wx, wy, 0.0],
                efficiencies: [d1, d2, 1.0, 1.0],
            }
        })
        .collect()
}
