// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dispersion;
pub mod error;
pub mod io;
pub mod medium;
pub mod ray;
pub mod scalar;
pub mod scenarios;
pub mod wave;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision forms of the generic physics types.
pub type MediumSpec = medium::MediumSpec<f64>;
pub type MediumProfiles = medium::MediumProfiles<f64>;
pub type Profile = medium::Profile<f64>;
pub type RayState = ray::RayState<f64>;
pub type RayTrajectory = ray::RayTrajectory<f64>;
pub type Grid1D = wave::Grid1D<f64>;
pub type FieldState = wave::FieldState<f64>;
