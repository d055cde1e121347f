//! Geometric port-Hamiltonian modelling, adaptive tracking control and
//! stability certification for rigid bodies on SE(3).
//!
//! Numerical code is generic over [`real::Real`]; the aliases below fix the
//! scalar to `f64` for everyday use.

pub mod adaptation;
pub mod autodiff;
pub mod certifier;
pub mod controller;
pub mod diagnostics;
pub mod disturbance;
pub mod dynamics;
pub mod geometry;
pub mod harness;
pub mod learning;
pub mod linalg;
pub mod real;
pub mod trajectory;
pub mod vehicle;

pub use real::Real;

pub type GeneralizedCoord = geometry::GeneralizedCoord<f64>;
pub type RotationMatrix = geometry::RotationMatrix<f64>;
pub type HamiltonianState = dynamics::HamiltonianState<f64>;
pub type ControlInput = dynamics::ControlInput<f64>;
pub type QuadrotorModel = vehicle::QuadrotorModel<f64>;
pub type RigidBodyModel = vehicle::RigidBodyModel<f64>;
pub type RotorConfig = vehicle::RotorConfig<f64>;
pub type ReferencePoint = trajectory::ReferencePoint<f64>;
pub type TrackingErrors = controller::TrackingErrors<f64>;
pub type WeightEstimate = adaptation::WeightEstimate<f64>;
