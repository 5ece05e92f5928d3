//! Normalizing-flow Boltzmann generators trained on analytic unnormalized
//! densities with data-based objectives plus log-dispersion regularization.
//!
//! Every numeric routine is generic over [`Scalar`] (implemented for `f32`
//! and `f64`); the aliases below fix the scalar to `f64`, which is what the
//! training workflows and the CLI use.

pub mod annealing;
pub mod augment;
pub mod data;
pub mod error;
pub mod flow;
pub mod impsampling;
pub mod metrics;
pub mod objectives;
pub mod optim;
pub mod scalar;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Flow = flow::FlowModel<f64>;
pub type Gmm = targets::GmmTarget<f64>;
pub type Target = targets::TargetDensity<f64>;
pub type Dataset = data::LabeledDataset<f64>;
